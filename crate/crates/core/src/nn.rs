//! Named parameter and buffer storage shared by the model components.

use rand::Rng;

use crate::autodiff::{BnOptions, Graph, Mode, RunningStats, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// How the optimizer treats a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Weight matrices and kernels; subject to weight decay.
    Weight,
    Bias,
    /// Batch-norm scale and shift.
    Norm,
}

impl ParamKind {
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BufferId(usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<(String, RunningStats)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind) -> ParamId {
        let name = name.into();
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate parameter {name}");
        self.params.push(Param { name, value, kind });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, stats: RunningStats) -> BufferId {
        self.buffers.push((name.into(), stats));
        BufferId(self.buffers.len() - 1)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn buffers(&self) -> &[(String, RunningStats)] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [(String, RunningStats)] {
        &mut self.buffers
    }

    pub fn buffer(&self, id: BufferId) -> &RunningStats {
        &self.buffers[id.0].1
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Adds every parameter to `g` as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.params.iter().map(|p| g.leaf(p.value.clone(), true)).collect())
    }
}

/// Graph leaves for a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Uses existing graph variables as the parameters, e.g. leaves
    /// created by a gradient checker. Order must match the store.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Everything a forward pass needs besides its inputs.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    pub bound: &'a Bound,
    pub store: &'a mut ParamStore,
    pub mode: Mode,
}

impl Ctx<'_> {
    pub fn p(&self, id: ParamId) -> Var {
        self.bound.get(id)
    }

    pub fn batch_norm(&mut self, x: Var, bn: &BatchNormIds, axis: usize, update_running: bool) -> Result<Var> {
        let mut opts = BnOptions::new(axis, self.mode);
        opts.update_running = update_running;
        let (gamma, beta) = (self.bound.get(bn.gamma), self.bound.get(bn.beta));
        let running = &mut self.store.buffers[bn.stats.0].1;
        self.g.batch_norm(x, gamma, beta, running, opts)
    }
}

/// Parameters and running statistics of one batch-norm layer.
#[derive(Clone, Copy, Debug)]
pub struct BatchNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BufferId,
}

impl BatchNormIds {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones([channels]), ParamKind::Norm),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros([channels]), ParamKind::Norm),
            stats: store.add_buffer(prefix.to_string(), RunningStats::new(channels)),
        }
    }
}

/// He-style fan-in normal initialization for convolution kernels.
pub fn conv_init(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    Tensor::randn(shape.to_vec(), (2.0 / fan_in as f64).sqrt(), rng)
}

/// Uniform `±1/sqrt(fan_in)` initialization for dense weights.
pub fn dense_init(d_out: usize, d_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = 1.0 / (d_in as f64).sqrt();
    Tensor::uniform([d_out, d_in], -bound, bound, rng)
}

/// A dense layer with bias.
#[derive(Clone, Copy, Debug)]
pub struct DenseIds {
    pub w: ParamId,
    pub b: ParamId,
}

impl DenseIds {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add(format!("{prefix}.weight"), dense_init(d_out, d_in, rng), ParamKind::Weight),
            b: store.add(format!("{prefix}.bias"), Tensor::zeros([d_out]), ParamKind::Bias),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        ctx.g.dense(x, w, Some(b))
    }
}
