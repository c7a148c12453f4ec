//! Spatial-temporal integration of a refined sequence into one descriptor.
//!
//! Two 3D convolution blocks (`1×1×1` then `3×3×3`, each followed by batch
//! norm and ReLU) see the whole `[C, T, H, W]` volume, and a global mean over
//! time and space yields the descriptor.

use rand::Rng;

use crate::autodiff::{ConvGeom, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::nn::{conv_init, BatchNormIds, Ctx, ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Descriptor width.
pub const DESCRIPTOR_DIM: usize = 256;

/// A video descriptor `f`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoDescriptor(pub Tensor);

#[derive(Clone, Copy, Debug)]
struct Block {
    w: ParamId,
    bn: BatchNormIds,
}

#[derive(Clone, Debug)]
pub struct Stim {
    in_channels: usize,
    width: usize,
    blocks: [Block; 2],
}

impl Stim {
    pub fn new(store: &mut ParamStore, in_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::with_width(store, in_channels, DESCRIPTOR_DIM, rng)
    }

    /// Like [`Stim::new`] with a non-default descriptor width; used by
    /// tests and benchmarks that need small models.
    pub fn with_width(store: &mut ParamStore, in_channels: usize, width: usize, rng: &mut impl Rng) -> Result<Self> {
        if in_channels == 0 || width == 0 {
            return Err(Error::Config("STIM channel counts must be positive".into()));
        }
        let w1 = store.add("stim.block1.conv.weight", conv_init(&[width, in_channels, 1, 1, 1], rng), ParamKind::Weight);
        let bn1 = BatchNormIds::new(store, "stim.block1.bn", width);
        let w2 = store.add("stim.block2.conv.weight", conv_init(&[width, width, 3, 3, 3], rng), ParamKind::Weight);
        let bn2 = BatchNormIds::new(store, "stim.block2.bn", width);
        Ok(Self {
            in_channels,
            width,
            blocks: [Block { w: w1, bn: bn1 }, Block { w: w2, bn: bn2 }],
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Block outputs `O`, `[B, width, T, H, W]`, for `s` of shape
    /// `[B, C, T, H, W]`.
    pub fn volume(&self, ctx: &mut Ctx<'_>, s: Var) -> Result<Var> {
        let shape = ctx.g.shape(s);
        if shape.len() != 5 || shape[1] != self.in_channels {
            return Err(Error::shape(
                "stim",
                format!("input must be [B, {}, T, H, W], got {shape:?}", self.in_channels),
            ));
        }
        let mut x = s;
        for (block, pad) in self.blocks.iter().zip([0, 1]) {
            let w = ctx.p(block.w);
            let y = ctx.g.conv3d_geom(x, w, None, ConvGeom::uniform3d(1, pad))?;
            let y = ctx.batch_norm(y, &block.bn, 1, true)?;
            x = ctx.g.relu(y)?;
        }
        Ok(x)
    }

    /// Descriptors `[B, width]`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, s: Var) -> Result<Var> {
        let o = self.volume(ctx, s)?;
        pool_descriptor(ctx.g, o)
    }

    /// Descriptor of one refined sequence `[C, T, H, W]`.
    pub fn describe(&self, store: &mut ParamStore, s: &Tensor, mode: Mode) -> Result<VideoDescriptor> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let mut shape = vec![1];
        shape.extend_from_slice(s.shape());
        let x = g.constant(s.reshape(shape)?);
        let mut ctx = Ctx {
            g: &mut g,
            bound: &bound,
            store,
            mode,
        };
        let f = self.forward(&mut ctx, x)?;
        Ok(VideoDescriptor(g.value(f).reshape(vec![self.width])?))
    }
}

/// Mean of `[B, D, T, H, W]` over time and space, giving `[B, D]`.
pub fn pool_descriptor(g: &mut Graph, o: Var) -> Result<Var> {
    if g.shape(o).len() != 5 {
        return Err(Error::shape("pool_descriptor", format!("expected rank 5, got {:?}", g.shape(o))));
    }
    g.mean(o, &[2, 3, 4], false)
}

/// Average pooling of an unrefined sequence `[B, C, T, H, W]` into `[B, C]`;
/// the descriptor of the pooling baseline.
pub fn baseline_pool(g: &mut Graph, s: Var) -> Result<Var> {
    pool_descriptor(g, s)
}
