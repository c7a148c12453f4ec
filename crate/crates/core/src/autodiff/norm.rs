//! Batch normalization over every axis except the channel axis.

use super::{Grads, Graph, Mode, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Exponential moving averages used in eval mode.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnOptions {
    pub axis: usize,
    pub mode: Mode,
    pub eps: f64,
    pub momentum: f64,
    /// Whether a train-mode call folds its batch statistics into the
    /// running averages.
    pub update_running: bool,
}

impl BnOptions {
    pub fn new(axis: usize, mode: Mode) -> Self {
        Self {
            axis,
            mode,
            eps: 1e-5,
            momentum: 0.1,
            update_running: true,
        }
    }
}

pub(crate) struct BnOp {
    pub(crate) x: Var,
    pub(crate) gamma: Var,
    pub(crate) beta: Var,
    axis: usize,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

fn layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl BnOp {
    pub(crate) fn backward(&self, g: &Graph, grad: &[f64], grads: &mut Grads<'_>) {
        let shape = g.value(self.x).shape();
        let (outer, c_n, inner) = layout(shape, self.axis);
        let gamma = g.value(self.gamma).data();
        let mut sum_g = vec![0.0; c_n];
        let mut sum_gx = vec![0.0; c_n];
        for o in 0..outer {
            for c in 0..c_n {
                let base = (o * c_n + c) * inner;
                for (g, x) in grad[base..base + inner].iter().zip(&self.xhat[base..base + inner]) {
                    sum_g[c] += g;
                    sum_gx[c] += g * x;
                }
            }
        }
        if grads.wants(self.x) {
            let m = (outer * inner) as f64;
            let mut dx = vec![0.0; grad.len()];
            for o in 0..outer {
                for c in 0..c_n {
                    let base = (o * c_n + c) * inner;
                    let scale = gamma[c] * self.inv_std[c];
                    for i in base..base + inner {
                        dx[i] = if self.batch_stats {
                            scale * (grad[i] - sum_g[c] / m - self.xhat[i] * sum_gx[c] / m)
                        } else {
                            scale * grad[i]
                        };
                    }
                }
            }
            grads.add(self.x, dx);
        }
        grads.add(self.gamma, sum_gx);
        grads.add(self.beta, sum_g);
    }
}

impl Graph {
    /// Normalizes `x` per channel (`opts.axis`), then applies `gamma`/`beta`.
    ///
    /// Train mode uses batch statistics (biased variance) and, when
    /// `opts.update_running` is set, updates `running` with the unbiased
    /// variance. Eval mode reads `running` only.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats,
        opts: BnOptions,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if opts.axis >= shape.len() {
            return Err(Error::shape("batch_norm", format!("axis {} out of range for {shape:?}", opts.axis)));
        }
        let (outer, c_n, inner) = layout(&shape, opts.axis);
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c_n] {
                return Err(Error::shape(
                    "batch_norm",
                    format!("{what} shape {:?}, expected [{c_n}]", self.shape(v)),
                ));
            }
        }
        if running.channels() != c_n {
            return Err(Error::shape(
                "batch_norm",
                format!("running stats have {} channels, input has {c_n}", running.channels()),
            ));
        }
        let xd = self.value(x).data();
        let m = outer * inner;
        let batch_stats = opts.mode == Mode::Train;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; c_n];
            for o in 0..outer {
                for (c, acc) in mean.iter_mut().enumerate() {
                    let base = (o * c_n + c) * inner;
                    *acc += xd[base..base + inner].iter().sum::<f64>();
                }
            }
            for v in &mut mean {
                *v /= m as f64;
            }
            let mut var = vec![0.0; c_n];
            for o in 0..outer {
                for c in 0..c_n {
                    let base = (o * c_n + c) * inner;
                    var[c] += xd[base..base + inner].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
                }
            }
            for v in &mut var {
                *v /= m as f64;
            }
            (mean, var)
        } else {
            (running.mean.clone(), running.var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + opts.eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for c in 0..c_n {
                let base = (o * c_n + c) * inner;
                for i in base..base + inner {
                    xhat[i] = (xd[i] - mean[c]) * inv_std[c];
                    out[i] = gd[c] * xhat[i] + bd[c];
                }
            }
        }
        if batch_stats && opts.update_running {
            let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
            for c in 0..c_n {
                running.mean[c] = (1.0 - opts.momentum) * running.mean[c] + opts.momentum * mean[c];
                running.var[c] = (1.0 - opts.momentum) * running.var[c] + opts.momentum * var[c] * unbias;
            }
        }
        let op = BnOp {
            x,
            gamma,
            beta,
            axis: opts.axis,
            xhat,
            inv_std,
            batch_stats,
        };
        self.push(Tensor::from_parts(shape, out), Op::BatchNorm(op), "batch_norm")
    }
}
