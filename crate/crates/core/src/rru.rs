//! Refining recurrent unit.
//!
//! Each raw frame map `X_t` is rewritten as a gated convex combination of
//! itself and the previous refined map, `S_t = (1 - Z) ⊙ S_{t-1} + Z ⊙ X_t`.
//! The gate `Z` comes from a small model fed with the appearance difference
//! `X_t - S_{t-1}` and the motion difference `X_t - X_{t-1}`, split into a
//! spatial branch (one weight per position) and a channel branch (one weight
//! per channel) whose product goes through a sigmoid.
//!
//! The recurrence starts from `X_0 = S_0 = X_1`, so `S_1 = X_1`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::nn::{conv_init, BatchNormIds, Ctx, DenseIds, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Which inputs and branches the gate model uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RruVariant {
    /// Both differences in, both branches out.
    #[default]
    Full,
    SpatialOnly,
    ChannelOnly,
    /// Only `X_t - S_{t-1}` feeds the transition layer.
    AppearanceDiffOnly,
    /// `[X_t, S_{t-1}]` instead of the two differences.
    RawConcat,
}

impl RruVariant {
    pub const ALL: [RruVariant; 5] = [
        RruVariant::Full,
        RruVariant::SpatialOnly,
        RruVariant::ChannelOnly,
        RruVariant::AppearanceDiffOnly,
        RruVariant::RawConcat,
    ];

    fn name(self) -> &'static str {
        match self {
            RruVariant::Full => "full",
            RruVariant::SpatialOnly => "spatial_only",
            RruVariant::ChannelOnly => "channel_only",
            RruVariant::AppearanceDiffOnly => "appearance_diff_only",
            RruVariant::RawConcat => "raw_concat",
        }
    }

    fn uses_spatial(self) -> bool {
        self != RruVariant::ChannelOnly
    }

    fn uses_channel(self) -> bool {
        self != RruVariant::SpatialOnly
    }

    fn input_channels(self, c: usize) -> usize {
        if self == RruVariant::AppearanceDiffOnly {
            c
        } else {
            2 * c
        }
    }

    /// Whether the gate input is identically zero at the first step, where
    /// `X_0 = S_0 = X_1`. Such steps must not pollute running statistics.
    fn first_step_is_degenerate(self) -> bool {
        self != RruVariant::RawConcat
    }
}

impl fmt::Display for RruVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RruVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown RRU variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RruConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Filters of the transition layer.
    pub transition_channels: usize,
    /// Hidden width of the spatial branch.
    pub spatial_hidden: usize,
    pub variant: RruVariant,
}

impl RruConfig {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            transition_channels: 256,
            spatial_hidden: 128,
            variant: RruVariant::Full,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.channels, self.height, self.width, self.transition_channels, self.spatial_hidden];
        if dims.contains(&0) {
            return Err(Error::Config(format!("RRU dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Update gate for one time step, `[C, H, W]`, entries in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateMap(pub Tensor);

/// Stacked refined maps `[C, T, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinedSequence(pub Tensor);

/// Graph handles produced by [`GateModel::refine`]; each entry is
/// `[B, C, H, W]`.
#[derive(Clone, Debug)]
pub struct Refinement {
    pub steps: Vec<Var>,
    pub gates: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct GateModel {
    cfg: RruConfig,
    transition: ParamId,
    bn: BatchNormIds,
    spatial: Option<(DenseIds, DenseIds)>,
    channel: Option<DenseIds>,
}

impl GateModel {
    pub fn new(store: &mut ParamStore, cfg: RruConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c_in = cfg.variant.input_channels(cfg.channels);
        let d = cfg.transition_channels;
        let transition = store.add("rru.transition.weight", conv_init(&[d, c_in, 1, 1], rng), ParamKind::Weight);
        let bn = BatchNormIds::new(store, "rru.transition.bn", d);
        let hw = cfg.height * cfg.width;
        let spatial = cfg.variant.uses_spatial().then(|| {
            (
                DenseIds::new(store, "rru.spatial.fc1", hw, cfg.spatial_hidden, rng),
                DenseIds::new(store, "rru.spatial.fc2", cfg.spatial_hidden, hw, rng),
            )
        });
        let channel = cfg
            .variant
            .uses_channel()
            .then(|| DenseIds::new(store, "rru.channel.fc", d, cfg.channels, rng));
        Ok(Self {
            cfg,
            transition,
            bn,
            spatial,
            channel,
        })
    }

    pub fn config(&self) -> &RruConfig {
        &self.cfg
    }

    fn check(&self, g: &Graph, what: &str, v: Var) -> Result<usize> {
        let s = g.shape(v);
        let want = [self.cfg.channels, self.cfg.height, self.cfg.width];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::shape(
                "rru",
                format!("{what} must be [B, {}, {}, {}], got {s:?}", want[0], want[1], want[2]),
            ));
        }
        Ok(s[0])
    }

    /// Update gate `[B, C, H, W]` for one step. `update_running` controls
    /// whether a train-mode call updates the transition layer's running
    /// statistics.
    pub fn gate(&self, ctx: &mut Ctx<'_>, x_t: Var, x_prev: Var, s_prev: Var, update_running: bool) -> Result<Var> {
        let b = self.check(ctx.g, "x_t", x_t)?;
        for (what, v) in [("x_prev", x_prev), ("s_prev", s_prev)] {
            if self.check(ctx.g, what, v)? != b {
                return Err(Error::shape("rru", format!("{what} batch differs from x_t ({b})")));
            }
        }
        let (c, h, w) = (self.cfg.channels, self.cfg.height, self.cfg.width);
        let input = match self.cfg.variant {
            RruVariant::RawConcat => ctx.g.concat(&[x_t, s_prev], 1)?,
            RruVariant::AppearanceDiffOnly => ctx.g.sub(x_t, s_prev)?,
            _ => {
                let appearance = ctx.g.sub(x_t, s_prev)?;
                let motion = ctx.g.sub(x_t, x_prev)?;
                ctx.g.concat(&[appearance, motion], 1)?
            }
        };
        let wt = ctx.p(self.transition);
        let z = ctx.g.conv2d(input, wt, None, 1, 0)?;
        let z = ctx.batch_norm(z, &self.bn, 1, update_running)?;
        let z = ctx.g.relu(z)?;

        let spatial = match &self.spatial {
            Some((fc1, fc2)) => {
                let m = ctx.g.mean(z, &[1], false)?;
                let m = ctx.g.reshape(m, &[b, h * w])?;
                let m = fc1.forward(ctx, m)?;
                let m = ctx.g.relu(m)?;
                let m = fc2.forward(ctx, m)?;
                Some(ctx.g.reshape(m, &[b, 1, h, w])?)
            }
            None => None,
        };
        let channel = match &self.channel {
            Some(fc) => {
                let m = ctx.g.mean(z, &[2, 3], false)?;
                let m = fc.forward(ctx, m)?;
                Some(ctx.g.reshape(m, &[b, c, 1, 1])?)
            }
            None => None,
        };
        let logits = match (spatial, channel) {
            (Some(s), Some(ch)) => ctx.g.mul(s, ch)?,
            (Some(s), None) => ctx.g.broadcast_to(s, &[b, c, h, w])?,
            (None, Some(ch)) => ctx.g.broadcast_to(ch, &[b, c, h, w])?,
            (None, None) => unreachable!("every variant has a branch"),
        };
        ctx.g.sigmoid(logits)
    }

    /// Runs the recurrence over `frames` (each `[B, C, H, W]`).
    pub fn refine(&self, ctx: &mut Ctx<'_>, frames: &[Var]) -> Result<Refinement> {
        let Some(&first) = frames.first() else {
            return Err(Error::InvalidArgument("cannot refine an empty sequence".into()));
        };
        let mut steps = Vec::with_capacity(frames.len());
        let mut gates = Vec::with_capacity(frames.len());
        let (mut x_prev, mut s_prev) = (first, first);
        for (t, &x_t) in frames.iter().enumerate() {
            let update = !(t == 0 && self.cfg.variant.first_step_is_degenerate());
            let z = self.gate(ctx, x_t, x_prev, s_prev, update)?;
            let s = refine_step(ctx.g, x_t, s_prev, z)?;
            steps.push(s);
            gates.push(z);
            x_prev = x_t;
            s_prev = s;
        }
        Ok(Refinement { steps, gates })
    }

    /// Refines one sequence `[T, C, H, W]` outside of training. Returns the
    /// refined sequence `[C, T, H, W]` and, if `keep_gates`, the gate of
    /// every step.
    pub fn refine_sequence(
        &self,
        store: &mut ParamStore,
        frames: &Tensor,
        mode: Mode,
        keep_gates: bool,
    ) -> Result<(RefinedSequence, Option<Vec<GateMap>>)> {
        let s = frames.shape();
        if s.len() != 4 || s[0] == 0 {
            return Err(Error::shape("rru", format!("sequence must be [T, C, H, W] with T ≥ 1, got {s:?}")));
        }
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let seq = g.constant(frames.clone());
        let per_frame = [1, s[1], s[2], s[3]];
        let frame_vars = (0..s[0])
            .map(|t| {
                let f = g.select(seq, 0, t)?;
                g.reshape(f, &per_frame)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut ctx = Ctx {
            g: &mut g,
            bound: &bound,
            store,
            mode,
        };
        let r = self.refine(&mut ctx, &frame_vars)?;
        let stacked = g.stack(&r.steps, 2)?;
        let refined = g.value(stacked).reshape(vec![s[1], s[0], s[2], s[3]])?;
        let gates = keep_gates.then(|| {
            r.gates
                .iter()
                .map(|&z| GateMap(Tensor::from_parts(s[1..].to_vec(), g.value(z).data().to_vec())))
                .collect()
        });
        Ok((RefinedSequence(refined), gates))
    }
}

/// `S_t = (1 - Z) ⊙ S_{t-1} + Z ⊙ X_t`.
pub fn refine_step(g: &mut Graph, x_t: Var, s_prev: Var, z: Var) -> Result<Var> {
    g.blend(z, s_prev, x_t)
}

/// Runs the recurrence of a `[T, C, H, W]` sequence with externally
/// supplied gates, one `[C, H, W]` map per step.
pub fn refine_with_gates(frames: &Tensor, gates: &[GateMap]) -> Result<RefinedSequence> {
    let s = frames.shape();
    if s.len() != 4 || s[0] == 0 || gates.len() != s[0] {
        return Err(Error::shape(
            "refine_with_gates",
            format!("{} gates for sequence {s:?}", gates.len()),
        ));
    }
    let mut g = Graph::new();
    let seq = g.constant(frames.clone());
    let x0 = g.select(seq, 0, 0)?;
    let (mut s_prev, mut steps) = (x0, Vec::with_capacity(s[0]));
    for (t, z) in gates.iter().enumerate() {
        if z.0.shape() != &s[1..] {
            return Err(Error::shape("refine_with_gates", format!("gate {t} has shape {:?}", z.0.shape())));
        }
        let x_t = g.select(seq, 0, t)?;
        let z = g.constant(z.0.clone());
        s_prev = refine_step(&mut g, x_t, s_prev, z)?;
        steps.push(s_prev);
    }
    let stacked = g.stack(&steps, 1)?;
    Ok(RefinedSequence(g.value(stacked).clone()))
}
