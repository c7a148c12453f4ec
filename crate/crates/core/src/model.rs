//! The full sequence model: per-frame backbone, optional recurrent
//! refinement, spatial-temporal integration (or plain average pooling) and
//! the identity classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::nn::{Ctx, ParamStore};
use crate::objectives::{
    cross_entropy_losses, part_features, part_level_loss, total_loss, ClassifierBlock, LossParts, LossTerms,
};
use crate::rru::{GateMap, GateModel, RruConfig, RruVariant};
use crate::stim::{baseline_pool, Stim, VideoDescriptor, DESCRIPTOR_DIM};
use crate::tensor::Tensor;

/// How a sequence volume becomes one descriptor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Pooling {
    #[default]
    Stim,
    /// Mean over time and space of the (refined or raw) feature maps.
    Average,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub use_rru: bool,
    pub rru_variant: RruVariant,
    pub transition_channels: usize,
    pub spatial_hidden: usize,
    pub pooling: Pooling,
    /// Output width of the integration module.
    pub descriptor_dim: usize,
    pub classifier_hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            use_rru: true,
            rru_variant: RruVariant::Full,
            transition_channels: 256,
            spatial_hidden: 128,
            pooling: Pooling::Stim,
            descriptor_dim: DESCRIPTOR_DIM,
            classifier_hidden: 512,
            dropout: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.transition_channels == 0 || self.spatial_hidden == 0 {
            return Err(Error::Config("gate model widths must be positive".into()));
        }
        if self.descriptor_dim == 0 || self.classifier_hidden == 0 {
            return Err(Error::Config("descriptor and classifier widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Width of the descriptor the model emits.
    pub fn output_dim(&self) -> usize {
        match self.pooling {
            Pooling::Stim => self.descriptor_dim,
            Pooling::Average => self.backbone.channels(),
        }
    }
}

/// Graph handles of one forward pass over `B` sequences of `T` frames.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Raw maps `X`, one `[B, C, H, W]` per step.
    pub raw: Vec<Var>,
    /// Sequence volume `[B, C, T, H, W]` (refined when the RRU is on).
    pub volume: Var,
    /// Gates per step, empty without the RRU.
    pub gates: Vec<Var>,
    /// `[B, D]`
    pub descriptors: Var,
    /// Backbone second-stage activations of every frame.
    pub penultimate: Var,
}

/// Per-step raw maps, refined maps and gates of one sequence, each
/// `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTrace {
    pub raw: Vec<Tensor>,
    pub refined: Vec<Tensor>,
    pub gates: Vec<GateMap>,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    backbone: Backbone,
    rru: Option<GateModel>,
    stim: Option<Stim>,
    classifier: ClassifierBlock,
}

impl Model {
    /// Builds a model with freshly initialized parameters in `store`.
    /// Parameter creation order, and so the result, is fixed by `seed`.
    pub fn new(store: &mut ParamStore, cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(store, cfg.backbone.clone(), &mut rng)?;
        let c = cfg.backbone.channels();
        let (h, w) = cfg.backbone.feature_size();
        let rru = if cfg.use_rru {
            let rc = RruConfig {
                channels: c,
                height: h,
                width: w,
                transition_channels: cfg.transition_channels,
                spatial_hidden: cfg.spatial_hidden,
                variant: cfg.rru_variant,
            };
            Some(GateModel::new(store, rc, &mut rng)?)
        } else {
            None
        };
        let stim = match cfg.pooling {
            Pooling::Stim => Some(Stim::with_width(store, c, cfg.descriptor_dim, &mut rng)?),
            Pooling::Average => None,
        };
        let mut classifier = ClassifierBlock::new(
            store,
            cfg.output_dim(),
            cfg.classifier_hidden,
            cfg.backbone.num_identities,
            &mut rng,
        );
        classifier.dropout = cfg.dropout;
        Ok(Self {
            cfg,
            backbone,
            rru,
            stim,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn check_frames(&self, shape: &[usize]) -> Result<()> {
        let b = &self.cfg.backbone;
        let want = [b.in_channels, b.image_height, b.image_width];
        if shape.len() != 5 || shape[0] == 0 || shape[1] == 0 || shape[2..] != want {
            return Err(Error::shape(
                "model",
                format!("frames must be [B, T, {}, {}, {}], got {shape:?}", want[0], want[1], want[2]),
            ));
        }
        Ok(())
    }

    /// Runs the model on frames `[B, T, 3, h, w]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, frames: Var) -> Result<Forward> {
        let shape = ctx.g.shape(frames).to_vec();
        self.check_frames(&shape)?;
        let (b, t) = (shape[0], shape[1]);
        let flat = ctx.g.reshape(frames, &[b * t, shape[2], shape[3], shape[4]])?;
        let out = self.backbone.extract(ctx, flat)?;
        let c = self.cfg.backbone.channels();
        let (h, w) = self.cfg.backbone.feature_size();
        let x = ctx.g.reshape(out.features, &[b, t, c, h, w])?;
        let raw = (0..t).map(|i| ctx.g.select(x, 1, i)).collect::<Result<Vec<_>>>()?;
        let (volume, gates) = match &self.rru {
            Some(rru) => {
                let r = rru.refine(ctx, &raw)?;
                (ctx.g.stack(&r.steps, 2)?, r.gates)
            }
            None => (ctx.g.permute(x, &[0, 2, 1, 3, 4])?, Vec::new()),
        };
        let descriptors = match &self.stim {
            Some(stim) => stim.forward(ctx, volume)?,
            None => baseline_pool(ctx.g, volume)?,
        };
        Ok(Forward {
            raw,
            volume,
            gates,
            descriptors,
            penultimate: out.penultimate,
        })
    }

    /// Evaluates the enabled loss terms on one labeled batch. The part
    /// term needs refined maps and is skipped without the RRU.
    pub fn loss(
        &self,
        ctx: &mut Ctx<'_>,
        frames: Var,
        labels: &[usize],
        terms: LossTerms,
        margin: f64,
        dropout_seed: u64,
    ) -> Result<(Var, LossParts)> {
        let fwd = self.forward(ctx, frames)?;
        self.loss_from_forward(ctx, &fwd, labels, terms, margin, dropout_seed)
    }

    /// Like [`Model::loss`] on an existing forward pass, so callers can
    /// also reach intermediate values such as the gates.
    pub fn loss_from_forward(
        &self,
        ctx: &mut Ctx<'_>,
        fwd: &Forward,
        labels: &[usize],
        terms: LossTerms,
        margin: f64,
        dropout_seed: u64,
    ) -> Result<(Var, LossParts)> {
        let b = ctx.g.shape(fwd.descriptors)[0];
        if labels.len() != b {
            return Err(Error::shape("model", format!("{} labels for {b} sequences", labels.len())));
        }
        let mut parts = LossParts::default();
        if terms.classification {
            let logits = self.classifier.forward(ctx, fwd.descriptors, dropout_seed)?;
            let frame_logits = self.backbone.aux_logits(ctx, fwd.penultimate)?;
            parts.classification = Some(cross_entropy_losses(ctx.g, logits, frame_logits, labels)?);
        }
        if terms.video {
            parts.video = Some(ctx.g.batch_hard_triplet(fwd.descriptors, labels, margin)?);
        }
        if terms.part && self.rru.is_some() {
            let p = part_features(ctx.g, fwd.volume)?;
            parts.part = Some(part_level_loss(ctx.g, p, labels, margin)?);
        }
        Ok((total_loss(ctx.g, &parts)?, parts))
    }

    /// Eval-mode descriptors `[B, D]` of sequences `[B, T, 3, h, w]`.
    /// Sequences are independent in eval mode, so the result for one
    /// sequence does not depend on the rest of the batch.
    pub fn describe_batch(&self, store: &mut ParamStore, sequences: &Tensor) -> Result<Tensor> {
        self.check_frames(sequences.shape())?;
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let x = g.constant(sequences.clone());
        let mut ctx = Ctx {
            g: &mut g,
            bound: &bound,
            store,
            mode: Mode::Eval,
        };
        let fwd = self.forward(&mut ctx, x)?;
        Ok(g.value(fwd.descriptors).clone())
    }

    /// Eval-mode descriptor of one sequence `[T, 3, h, w]` using all of its
    /// frames.
    pub fn extract_descriptor(&self, store: &mut ParamStore, sequence: &Tensor) -> Result<VideoDescriptor> {
        let mut shape = vec![1];
        shape.extend_from_slice(sequence.shape());
        let d = self.describe_batch(store, &sequence.reshape(shape)?)?;
        let dim = d.numel();
        Ok(VideoDescriptor(d.reshape(vec![dim])?))
    }

    /// Eval-mode raw maps, refined maps and gates of one sequence
    /// `[T, 3, h, w]`. Fails if the model has no RRU.
    pub fn trace(&self, store: &mut ParamStore, sequence: &Tensor) -> Result<GateTrace> {
        if self.rru.is_none() {
            return Err(Error::InvalidArgument("model has no RRU, so there are no gates".into()));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(sequence.shape());
        self.check_frames(&shape)?;
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let x = g.constant(sequence.reshape(shape)?);
        let mut ctx = Ctx {
            g: &mut g,
            bound: &bound,
            store,
            mode: Mode::Eval,
        };
        let fwd = self.forward(&mut ctx, x)?;
        let steps = (0..sequence.shape()[0])
            .map(|i| g.select(fwd.volume, 2, i))
            .collect::<Result<Vec<_>>>()?;
        let map = |v: Var| {
            let t = g.value(v);
            t.reshape(t.shape()[1..].to_vec())
        };
        Ok(GateTrace {
            raw: fwd.raw.iter().map(|&v| map(v)).collect::<Result<_>>()?,
            refined: steps.iter().map(|&v| map(v)).collect::<Result<_>>()?,
            gates: fwd.gates.iter().map(|&v| map(v).map(GateMap)).collect::<Result<_>>()?,
        })
    }
}
