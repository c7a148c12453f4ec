//! Per-frame convolutional feature extractor and its auxiliary identity
//! head.
//!
//! Three stages of `3×3` stride-2 convolution, batch norm and ReLU map a
//! `[3, h, w]` frame to a `[C, h/8, w/8]` feature map. The same weights are
//! applied to every frame of every sequence.

use rand::Rng;

use crate::autodiff::{Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::nn::{conv_init, BatchNormIds, Ctx, DenseIds, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Output channels of the three stages; the last one is `C`.
    pub widths: [usize; 3],
    pub image_height: usize,
    pub image_width: usize,
    pub num_identities: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            widths: [16, 32, 32],
            image_height: 64,
            image_width: 32,
            num_identities: 8,
        }
    }
}

fn halved(x: usize) -> usize {
    // 3×3 kernel, stride 2, padding 1
    (x - 1) / 2 + 1
}

impl BackboneConfig {
    pub fn channels(&self) -> usize {
        self.widths[2]
    }

    /// Spatial size `(H, W)` of the final feature map.
    pub fn feature_size(&self) -> (usize, usize) {
        (
            halved(halved(halved(self.image_height))),
            halved(halved(halved(self.image_width))),
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.num_identities == 0 {
            return Err(Error::Config("num_identities must be positive".into()));
        }
        Ok(())
    }
}

/// Raw features `X` of a single frame, `[C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatures(pub Tensor);

#[derive(Clone, Copy, Debug)]
struct Stage {
    w: ParamId,
    bn: BatchNormIds,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    stages: [Stage; 3],
    aux: DenseIds,
}

/// Output of [`Backbone::extract`] for a batch of frames.
#[derive(Clone, Copy, Debug)]
pub struct BackboneOutput {
    /// `[N, C, H, W]`
    pub features: Var,
    /// Second-stage activations feeding the auxiliary head.
    pub penultimate: Var,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, cfg: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = cfg.in_channels;
        let stages = std::array::from_fn(|i| {
            let c_out = cfg.widths[i];
            let prefix = format!("backbone.stage{}", i + 1);
            let w = store.add(
                format!("{prefix}.conv.weight"),
                conv_init(&[c_out, c_in, 3, 3], rng),
                ParamKind::Weight,
            );
            let bn = BatchNormIds::new(store, &format!("{prefix}.bn"), c_out);
            c_in = c_out;
            Stage { w, bn }
        });
        let aux = DenseIds::new(store, "backbone.aux", cfg.widths[1], cfg.num_identities, rng);
        Ok(Self { cfg, stages, aux })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Extracts feature maps for a batch of frames `[N, 3, h, w]`.
    pub fn extract(&self, ctx: &mut Ctx<'_>, frames: Var) -> Result<BackboneOutput> {
        let s = ctx.g.shape(frames).to_vec();
        let want = [self.cfg.in_channels, self.cfg.image_height, self.cfg.image_width];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::shape(
                "backbone",
                format!("frames must be [N, {}, {}, {}], got {s:?}", want[0], want[1], want[2]),
            ));
        }
        let mut x = frames;
        let mut penultimate = frames;
        for (i, stage) in self.stages.iter().enumerate() {
            let w = ctx.p(stage.w);
            let y = ctx.g.conv2d(x, w, None, 2, 1)?;
            let y = ctx.batch_norm(y, &stage.bn, 1, true)?;
            x = ctx.g.relu(y)?;
            if i == 1 {
                penultimate = x;
            }
        }
        Ok(BackboneOutput {
            features: x,
            penultimate,
        })
    }

    /// Identity logits `[N, num_identities]` from second-stage activations:
    /// global average pool, then one dense layer.
    pub fn aux_logits(&self, ctx: &mut Ctx<'_>, penultimate: Var) -> Result<Var> {
        let pooled = ctx.g.mean(penultimate, &[2, 3], false)?;
        self.aux.forward(ctx, pooled)
    }

    /// Eval-mode features of one `[3, h, w]` frame.
    pub fn extract_frame(&self, store: &mut ParamStore, frame: &Tensor) -> Result<FrameFeatures> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let mut shape = vec![1];
        shape.extend_from_slice(frame.shape());
        let x = g.constant(frame.reshape(shape)?);
        let mut ctx = Ctx {
            g: &mut g,
            bound: &bound,
            store,
            mode: Mode::Eval,
        };
        let out = self.extract(&mut ctx, x)?;
        let f = g.value(out.features);
        Ok(FrameFeatures(f.reshape(f.shape()[1..].to_vec())?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> BackboneConfig {
        BackboneConfig {
            in_channels: 3,
            widths: [4, 6, 5],
            image_height: 16,
            image_width: 8,
            num_identities: 3,
        }
    }

    #[test]
    fn zero_image_gives_declared_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, BackboneConfig::default(), &mut rng).unwrap();
        assert_eq!(bb.config().feature_size(), (8, 4));
        let f = bb.extract_frame(&mut store, &Tensor::zeros([3, 64, 32])).unwrap();
        assert_eq!(f.0.shape(), &[32, 8, 4]);
        assert!(f.0.is_finite());
    }

    #[test]
    fn extraction_is_deterministic_and_stateless() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, small(), &mut rng).unwrap();
        let a = Tensor::uniform([3, 16, 8], 0.0, 1.0, &mut rng);
        let b = Tensor::uniform([3, 16, 8], 0.0, 1.0, &mut rng);
        let fa = bb.extract_frame(&mut store, &a).unwrap();
        bb.extract_frame(&mut store, &b).unwrap();
        assert_eq!(bb.extract_frame(&mut store, &a).unwrap(), fa);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, small(), &mut rng).unwrap();
        assert!(bb.extract_frame(&mut store, &Tensor::zeros([3, 8, 8])).is_err());
        assert!(bb.extract_frame(&mut store, &Tensor::zeros([1, 16, 8])).is_err());
    }

    #[test]
    fn zero_aux_weights_give_uniform_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, small(), &mut rng).unwrap();
        let w = store.find("backbone.aux.weight").unwrap();
        store.param_mut(w).value.data_mut().fill(0.0);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let x = g.constant(Tensor::uniform([2, 3, 16, 8], 0.0, 1.0, &mut rng));
        let mut ctx = Ctx {
            g: &mut g,
            bound: &bound,
            store: &mut store,
            mode: Mode::Train,
        };
        let out = bb.extract(&mut ctx, x).unwrap();
        let logits = bb.aux_logits(&mut ctx, out.penultimate).unwrap();
        assert!(g.value(logits).data().iter().all(|&v| v == 0.0));
        let p = g.softmax(logits, 1).unwrap();
        for v in g.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }
}
