//! Elementwise ops, broadcasting binary ops, softmax and dense layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gemm::gemm;
use super::{Grads, Graph, Mode, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides, Tensor};

#[derive(Clone, Copy, Debug)]
pub(crate) enum Unary {
    Relu,
    Sigmoid,
    Log,
    Scale(f64),
    Clamp(f64, f64),
}

impl Unary {
    pub(crate) fn backward(&self, x: &Tensor, y: &Tensor, g: &[f64], xv: Var, grads: &mut Grads<'_>) {
        if !grads.wants(xv) {
            return;
        }
        let xd = x.data();
        let dx: Vec<f64> = match *self {
            Unary::Relu => g.iter().zip(xd).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
            Unary::Sigmoid => g.iter().zip(y.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
            Unary::Log => g.iter().zip(xd).map(|(g, x)| g / x).collect(),
            Unary::Scale(c) => g.iter().map(|g| g * c).collect(),
            Unary::Clamp(lo, hi) => g
                .iter()
                .zip(xd)
                .map(|(g, &x)| if x >= lo && x <= hi { *g } else { 0.0 })
                .collect(),
        };
        grads.add(xv, dx);
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
}

impl Binary {
    pub(crate) fn backward(&self, g: &Graph, a: Var, b: Var, out: &Tensor, grad: &[f64], grads: &mut Grads<'_>) {
        let at = g.value(a);
        let bt = g.value(b);
        let src_a = broadcast_source(out.shape(), at.shape());
        let src_b = broadcast_source(out.shape(), bt.shape());
        if let Some(slot) = grads.slot(a, at.numel()) {
            for (i, &gv) in grad.iter().enumerate() {
                slot[src_a[i]] += match self {
                    Binary::Add | Binary::Sub => gv,
                    Binary::Mul => gv * bt.data()[src_b[i]],
                };
            }
        }
        if let Some(slot) = grads.slot(b, bt.numel()) {
            for (i, &gv) in grad.iter().enumerate() {
                slot[src_b[i]] += match self {
                    Binary::Add => gv,
                    Binary::Sub => -gv,
                    Binary::Mul => gv * at.data()[src_a[i]],
                };
            }
        }
    }
}

/// Largest `f64` below 1.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Numerically stable logistic function. Results that would round to 0 or
/// 1 are kept at the nearest representable value inside the open unit
/// interval, so a gate is never exactly closed or open.
pub fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, BELOW_ONE)
}

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each flat output index, the flat index it reads from `input` under
/// right-aligned broadcasting.
pub(crate) fn broadcast_source(out: &[usize], input: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if out == input {
        return (0..n).collect();
    }
    let r = out.len();
    let mut padded = vec![1; r - input.len()];
    padded.extend_from_slice(input);
    let in_strides = strides(&padded);
    let eff: Vec<usize> = (0..r).map(|i| if padded[i] == 1 { 0 } else { in_strides[i] }).collect();
    let mut idx = vec![0usize; r];
    let mut src = Vec::with_capacity(n);
    let mut off = 0usize;
    for _ in 0..n {
        src.push(off);
        for d in (0..r).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    src
}

fn softmax_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub(crate) fn softmax_backward(y: &Tensor, axis: usize, log: bool, g: &[f64], xv: Var, grads: &mut Grads<'_>) {
    if !grads.wants(xv) {
        return;
    }
    let (outer, k, inner) = softmax_layout(y.shape(), axis);
    let yd = y.data();
    let mut dx = vec![0.0; yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * k + j) * inner + i;
            if log {
                let sum_g: f64 = (0..k).map(|j| g[at(j)]).sum();
                for j in 0..k {
                    dx[at(j)] = g[at(j)] - yd[at(j)].exp() * sum_g;
                }
            } else {
                let dot: f64 = (0..k).map(|j| g[at(j)] * yd[at(j)]).sum();
                for j in 0..k {
                    dx[at(j)] = yd[at(j)] * (g[at(j)] - dot);
                }
            }
        }
    }
    grads.add(xv, dx);
}

pub(crate) fn blend_backward(g: &Graph, z: Var, s: Var, x: Var, grad: &[f64], grads: &mut Grads<'_>) {
    let zd = g.value(z).data();
    let sd = g.value(s).data();
    let xd = g.value(x).data();
    if grads.wants(z) {
        grads.add(z, (0..grad.len()).map(|i| grad[i] * (xd[i] - sd[i])).collect());
    }
    if grads.wants(s) {
        grads.add(s, (0..grad.len()).map(|i| grad[i] * (1.0 - zd[i])).collect());
    }
    if grads.wants(x) {
        grads.add(x, (0..grad.len()).map(|i| grad[i] * zd[i]).collect());
    }
}

pub(crate) fn dense_backward(g: &Graph, x: Var, w: Var, b: Option<Var>, grad: &[f64], grads: &mut Grads<'_>) {
    let xt = g.value(x);
    let wt = g.value(w);
    let (dout, din) = (wt.shape()[0], wt.shape()[1]);
    let n = xt.numel() / din;
    if grads.wants(x) {
        let mut dx = vec![0.0; n * din];
        gemm(n, dout, din, grad, false, wt.data(), false, &mut dx, 0.0);
        grads.add(x, dx);
    }
    if grads.wants(w) {
        let mut dw = vec![0.0; dout * din];
        gemm(dout, n, din, grad, true, xt.data(), false, &mut dw, 0.0);
        grads.add(w, dw);
    }
    if let Some(b) = b {
        if let Some(slot) = grads.slot(b, dout) {
            for row in grad.chunks(dout) {
                for (s, v) in slot.iter_mut().zip(row) {
                    *s += v;
                }
            }
        }
    }
}

impl Graph {
    fn unary(&mut self, x: Var, kind: Unary, name: &'static str) -> Result<Var> {
        let xt = self.value(x);
        let out = match kind {
            Unary::Relu => xt.map(|v| v.max(0.0)),
            Unary::Sigmoid => xt.map(sigmoid),
            Unary::Log => xt.map(f64::ln),
            Unary::Scale(c) => xt.map(|v| v * c),
            Unary::Clamp(lo, hi) => xt.map(|v| v.clamp(lo, hi)),
        };
        if self.tracing() {
            let bits: Vec<u64> = match kind {
                Unary::Relu => xt.data().iter().map(|&v| (v > 0.0) as u64).collect(),
                Unary::Clamp(lo, hi) => xt.data().iter().map(|&v| (v >= lo) as u64 | ((v <= hi) as u64) << 1).collect(),
                _ => Vec::new(),
            };
            self.record_kink(bits);
        }
        self.push(out, Op::Unary { x, kind }, name)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid, "sigmoid")
    }

    /// Natural log; non-positive inputs surface as a non-finite error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log, "log")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Unary::Scale(c), "scale")
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::InvalidArgument(format!("clamp bounds {lo} > {hi}")));
        }
        self.unary(x, Unary::Clamp(lo, hi), "clamp")
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary, name: &'static str) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let shape = broadcast_shape(at.shape(), bt.shape()).ok_or_else(|| {
            Error::shape(name, format!("cannot broadcast {:?} with {:?}", at.shape(), bt.shape()))
        })?;
        let f = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
        };
        let data: Vec<f64> = if at.shape() == bt.shape() {
            at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_source(&shape, at.shape());
            let sb = broadcast_source(&shape, bt.shape());
            sa.iter().zip(&sb).map(|(&i, &j)| f(at.data()[i], bt.data()[j])).collect()
        };
        self.push(Tensor::from_parts(shape, data), Op::Binary { a, b, kind }, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, "sub")
    }

    /// Elementwise product with right-aligned broadcasting, so `[1, H, W]`
    /// times `[C, 1, 1]` yields `[C, H, W]`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, "mul")
    }

    /// Convex blend `(1 - z) * s + z * x`, elementwise.
    ///
    /// The result is clamped to `[min(s, x), max(s, x)]` so rounding can
    /// never leave the envelope; the clamp only absorbs ulp-level error and
    /// is treated as the identity when differentiating.
    pub fn blend(&mut self, z: Var, s: Var, x: Var) -> Result<Var> {
        let shape = self.shape(z).to_vec();
        if self.shape(s) != shape.as_slice() || self.shape(x) != shape.as_slice() {
            return Err(Error::shape(
                "blend",
                format!("gate {:?}, state {:?}, input {:?}", shape, self.shape(s), self.shape(x)),
            ));
        }
        let (zd, sd, xd) = (self.value(z).data(), self.value(s).data(), self.value(x).data());
        let data = (0..zd.len())
            .map(|i| {
                let v = (1.0 - zd[i]) * sd[i] + zd[i] * xd[i];
                v.clamp(sd[i].min(xd[i]), sd[i].max(xd[i]))
            })
            .collect();
        self.push(Tensor::from_parts(shape, data), Op::Blend { z, s, x }, "blend")
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - p)` at train
    /// time. Eval mode and `p == 0` return `x` unchanged.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64, mode: Mode) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p} not in [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let xt = self.value(x);
        let mask: Vec<f64> = (0..xt.numel())
            .map(|_| if rng.random::<f64>() >= p { keep } else { 0.0 })
            .collect();
        let data = xt.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = xt.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Dropout { x, mask }, "dropout")
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let name = if log { "log_softmax" } else { "softmax" };
        let xt = self.value(x);
        if axis >= xt.rank() {
            return Err(Error::shape(name, format!("axis {axis} out of range for {:?}", xt.shape())));
        }
        let (outer, k, inner) = softmax_layout(xt.shape(), axis);
        let xd = xt.data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * k + j) * inner + i;
                let max = (0..k).map(|j| xd[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..k).map(|j| (xd[at(j)] - max).exp()).sum();
                for j in 0..k {
                    out[at(j)] = if log {
                        xd[at(j)] - max - sum.ln()
                    } else {
                        (xd[at(j)] - max).exp() / sum
                    };
                }
            }
        }
        let shape = xt.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis, log }, name)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    /// Log-softmax with max subtraction.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    /// Fully connected layer: `x · wᵀ + b` with `x` either `[d_in]` or
    /// `[N, d_in]` and `w` `[d_out, d_in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 {
            return Err(Error::shape("dense", format!("weight must be rank 2, got {ws:?}")));
        }
        let (dout, din) = (ws[0], ws[1]);
        let (n, out_shape) = match xs.as_slice() {
            [d] if *d == din => (1, vec![dout]),
            [n, d] if *d == din => (*n, vec![*n, dout]),
            _ => {
                return Err(Error::shape(
                    "dense",
                    format!("input {xs:?} incompatible with weight {ws:?}"),
                ))
            }
        };
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::shape("dense", format!("bias {:?}, expected [{dout}]", self.shape(b))));
            }
        }
        let mut out = vec![0.0; n * dout];
        gemm(n, din, dout, self.value(x).data(), false, self.value(w).data(), true, &mut out, 0.0);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in out.chunks_mut(dout) {
                for (o, bv) in row.iter_mut().zip(bd) {
                    *o += bv;
                }
            }
        }
        self.push(Tensor::from_parts(out_shape, out), Op::Dense { x, w, b }, "dense")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_basics() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([3], vec![0.0, 800.0, -800.0]).unwrap());
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, BELOW_ONE, f64::MIN_POSITIVE]);
        assert!(g.value(y).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn relu_zeroes_negatives() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([3], vec![-2.0, -0.5, 1.5]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 1.5]);
    }

    #[test]
    fn broadcast_mul_spatial_by_channel() {
        let (c, h, w) = (3, 2, 4);
        let mut g = Graph::new();
        let a = g.constant(Tensor::full([1, h, w], 2.0));
        let b = g.constant(Tensor::full([c, 1, 1], 3.0));
        let y = g.mul(a, b).unwrap();
        assert_eq!(g.shape(y), &[c, h, w]);
        assert!(g.value(y).data().iter().all(|&v| v == 6.0));
    }

    #[test]
    fn broadcast_mul_gradient_sums_over_expanded_axes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new([1, 2], vec![1.0, 2.0]).unwrap(), true);
        let b = g.leaf(Tensor::new([3, 1], vec![1.0, 10.0, 100.0]).unwrap(), true);
        let y = g.mul(a, b).unwrap();
        let l = g.mean_all(y).unwrap();
        g.backward(l).unwrap();
        for v in g.grad(a).unwrap().data() {
            assert!((v - 111.0 / 6.0).abs() < 1e-12);
        }
        assert_eq!(g.grad(b).unwrap().data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn incompatible_broadcast_is_shape_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([4]));
        assert!(matches!(g.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn dropout_identity_in_eval_and_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones([10]));
        assert_eq!(g.dropout(x, 0.5, 1, Mode::Eval).unwrap(), x);
        assert_eq!(g.dropout(x, 0.0, 1, Mode::Train).unwrap(), x);
        let y = g.dropout(x, 0.5, 1, Mode::Train).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
        let y2 = g.dropout(x, 0.5, 1, Mode::Train).unwrap();
        assert_eq!(g.value(y), g.value(y2));
        assert!(g.dropout(x, 1.0, 1, Mode::Train).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_and_log_matches() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 1000.0, 0.0, -1000.0]).unwrap());
        let s = g.softmax(x, 1).unwrap();
        let ls = g.log_softmax(x, 1).unwrap();
        for r in 0..2 {
            let sum: f64 = (0..3).map(|j| g.value(s).get(&[r, j])).sum();
            assert!((sum - 1.0).abs() < 1e-15);
        }
        assert!((g.value(ls).get(&[0, 2]) - g.value(s).get(&[0, 2]).ln()).abs() < 1e-12);
        assert_eq!(g.value(ls).get(&[1, 0]), 0.0);
    }

    #[test]
    fn dense_identity_and_zero_weight() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([3], vec![1.0, -2.0, 3.0]).unwrap());
        let mut eye = Tensor::zeros([3, 3]);
        for i in 0..3 {
            eye.set(&[i, i], 1.0);
        }
        let w = g.constant(eye);
        let b = g.constant(Tensor::zeros([3]));
        let y = g.dense(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let w0 = g.constant(Tensor::zeros([2, 3]));
        let b2 = g.constant(Tensor::new([2], vec![0.5, -0.5]).unwrap());
        let y = g.dense(x, w0, Some(b2)).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -0.5]);
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::new([1], vec![2.0]).unwrap());
        let x = g.constant(Tensor::new([1], vec![4.0]).unwrap());
        for (z, want) in [(0.0, 2.0), (1.0, 4.0), (0.5, 3.0)] {
            let zv = g.constant(Tensor::new([1], vec![z]).unwrap());
            let y = g.blend(zv, s, x).unwrap();
            assert_eq!(g.value(y).data(), &[want]);
        }
    }
}
