//! Finite-difference checks of whole modules: each module is run in
//! training mode on small random inputs, reduced to a scalar through a
//! fixed random projection, and checked against its inputs and every
//! parameter.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gradcheck, GradcheckOptions, GradcheckReport};
use crate::autodiff::{Graph, Mode, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::nn::{Bound, Ctx, ParamStore};
use crate::objectives::{cross_entropy, part_features, part_level_loss, DEFAULT_MARGIN};
use crate::rru::{GateModel, RruConfig, RruVariant};
use crate::stim::Stim;
use crate::synthdata::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradModule {
    Rru,
    Stim,
    Loss,
    Backbone,
}

impl GradModule {
    pub const ALL: [GradModule; 4] = [GradModule::Rru, GradModule::Stim, GradModule::Loss, GradModule::Backbone];

    pub fn name(self) -> &'static str {
        match self {
            GradModule::Rru => "rru",
            GradModule::Stim => "stim",
            GradModule::Loss => "loss",
            GradModule::Backbone => "backbone",
        }
    }
}

impl fmt::Display for GradModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown module `{s}` (expected rru, stim, loss or backbone)")))
    }
}

/// Difference step of the suite. Module programs are deep enough that
/// rounding in `f` dominates a central difference at `1e-5` for
/// coordinates with small gradients (the error scales as `1 / step`), so
/// the suite uses the fourth-order stencil at a larger step.
pub const SUITE_STEP: f64 = 1e-4;

/// Problem size of the suite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteShape {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Transition channels of the gate model.
    pub transition: usize,
    /// Output width of the integration module. Kept small: its `3×3×3`
    /// kernel is quadratic in the width.
    pub stim_width: usize,
    /// Coordinates sampled per tensor.
    pub max_coords: usize,
}

impl Default for SuiteShape {
    fn default() -> Self {
        Self {
            channels: 4,
            frames: 3,
            height: 4,
            width: 3,
            transition: 256,
            stim_width: 16,
            max_coords: 24,
        }
    }
}

fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(Tensor::randn(g.shape(y).to_vec(), 1.0, &mut rng));
    let p = g.mul(y, r)?;
    g.mean_all(p)
}

/// Checks `run` with respect to `extra` inputs followed by every parameter
/// of `store`.
fn check_with_params(
    store: &mut ParamStore,
    extra: Vec<Tensor>,
    opts: &GradcheckOptions,
    mut run: impl FnMut(&mut Ctx<'_>, &[Var]) -> Result<Var>,
) -> Result<GradcheckReport> {
    let n_extra = extra.len();
    let mut inputs = extra;
    inputs.extend(store.params().iter().map(|p| p.value.clone()));
    gradcheck(
        |g, vars| {
            let bound = Bound::from_vars(vars[n_extra..].to_vec());
            let mut ctx = Ctx {
                g,
                bound: &bound,
                store,
                mode: Mode::Train,
            };
            run(&mut ctx, &vars[..n_extra])
        },
        &inputs,
        opts,
    )
}

fn split_frames(g: &mut Graph, seq: Var) -> Result<Vec<Var>> {
    let s = g.shape(seq).to_vec();
    (0..s[0])
        .map(|t| {
            let f = g.select(seq, 0, t)?;
            g.reshape(f, &[1, s[1], s[2], s[3]])
        })
        .collect()
}

fn check_rru(shape: &SuiteShape, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let variant = RruVariant::ALL[seed as usize % RruVariant::ALL.len()];
    let cfg = RruConfig {
        transition_channels: shape.transition,
        variant,
        ..RruConfig::new(shape.channels, shape.height, shape.width)
    };
    let mut store = ParamStore::new();
    let gate = GateModel::new(&mut store, cfg, &mut rng)?;
    // Zero-initialized biases would make every gate start at one point;
    // random values exercise the general case.
    for p in store.params_mut() {
        p.value = Tensor::randn(p.value.shape().to_vec(), 0.5, &mut rng);
    }
    let frames = Tensor::randn([shape.frames, shape.channels, shape.height, shape.width], 1.0, &mut rng);
    check_with_params(&mut store, vec![frames], opts, |ctx, x| {
        let steps = split_frames(ctx.g, x[0])?;
        let r = gate.refine(ctx, &steps)?;
        let s = ctx.g.stack(&r.steps, 0)?;
        project(ctx.g, s, seed)
    })
}

fn check_stim(shape: &SuiteShape, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let stim = Stim::with_width(&mut store, shape.channels, shape.stim_width, &mut rng)?;
    for p in store.params_mut() {
        if p.name.ends_with("beta") {
            p.value = Tensor::randn(p.value.shape().to_vec(), 0.5, &mut rng);
        }
    }
    let s = Tensor::randn([2, shape.channels, shape.frames, shape.height, shape.width], 1.0, &mut rng);
    check_with_params(&mut store, vec![s], opts, |ctx, x| {
        let f = stim.forward(ctx, x[0])?;
        project(ctx.g, f, seed)
    })
}

/// Classification, video triplet and part triplet losses on random
/// descriptors, logits and refined volumes of a PK batch.
fn check_loss(shape: &SuiteShape, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k) = (rng.random_range(2..=4), rng.random_range(2..=3));
    let labels: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let b = n * k;
    let d = rng.random_range(2..=5);
    let features = Tensor::randn([b, d], 1.0, &mut rng);
    let logits = Tensor::randn([b, n], 1.0, &mut rng);
    let volume = Tensor::randn([b, shape.channels, shape.frames, shape.height, shape.width], 1.0, &mut rng);
    gradcheck(
        |g, v| {
            let video = g.batch_hard_triplet(v[0], &labels, DEFAULT_MARGIN)?;
            let ce = cross_entropy(g, v[1], &labels)?;
            let p = part_features(g, v[2])?;
            let part = part_level_loss(g, p, &labels, DEFAULT_MARGIN)?;
            let sum = g.add(video, ce)?;
            g.add(sum, part)
        },
        &[features, logits, volume],
        opts,
    )
}

fn check_backbone(shape: &SuiteShape, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = BackboneConfig {
        in_channels: 3,
        widths: [4, 4, shape.channels],
        image_height: shape.height * 8,
        image_width: shape.width * 8,
        num_identities: 3,
    };
    let mut store = ParamStore::new();
    let bb = Backbone::new(&mut store, cfg.clone(), &mut rng)?;
    for p in store.params_mut() {
        if p.name.ends_with("beta") || p.name.ends_with("bias") {
            p.value = Tensor::randn(p.value.shape().to_vec(), 0.5, &mut rng);
        }
    }
    let frames = Tensor::uniform([shape.frames, 3, cfg.image_height, cfg.image_width], 0.0, 1.0, &mut rng);
    check_with_params(&mut store, vec![frames], opts, |ctx, x| {
        let out = bb.extract(ctx, x[0])?;
        let logits = bb.aux_logits(ctx, out.penultimate)?;
        let a = project(ctx.g, out.features, seed)?;
        let b = project(ctx.g, logits, seed + 1)?;
        ctx.g.add(a, b)
    })
}

/// Runs `module` for `seeds` seeds starting at `first_seed`.
pub fn check_module(
    module: GradModule,
    shape: &SuiteShape,
    first_seed: u64,
    seeds: u64,
    tol: f64,
) -> Result<GradcheckReport> {
    let mut total = GradcheckReport::empty_pass();
    for s in first_seed..first_seed + seeds {
        let opts = GradcheckOptions {
            tol,
            step: SUITE_STEP,
            five_point: true,
            kink_retries: 2,
            max_coords: Some(shape.max_coords),
            seed: derive_seed(&[s, module as u64]),
            ..GradcheckOptions::default()
        };
        let r = match module {
            GradModule::Rru => check_rru(shape, s, &opts),
            GradModule::Stim => check_stim(shape, s, &opts),
            GradModule::Loss => check_loss(shape, s, &opts),
            GradModule::Backbone => check_backbone(shape, s, &opts),
        }?;
        total = total.merge(&r);
    }
    Ok(total)
}
