//! Layout ops (reshape, permute, concat, select, broadcast) and mean
//! reductions.

use super::pointwise::{broadcast_shape, broadcast_source};
use super::{Grads, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{strides, MeanAccumulator, Tensor};

pub(crate) fn concat_backward(g: &Graph, inputs: &[Var], axis: usize, grad: &[f64], grads: &mut Grads<'_>) {
    let first = g.shape(inputs[0]);
    let outer: usize = first[..axis].iter().product();
    let inner: usize = first[axis + 1..].iter().product();
    let total: usize = inputs.iter().map(|&v| g.shape(v)[axis]).sum::<usize>() * inner;
    let mut start = 0;
    for &v in inputs {
        let chunk = g.shape(v)[axis] * inner;
        if grads.wants(v) {
            let mut dv = Vec::with_capacity(outer * chunk);
            for o in 0..outer {
                dv.extend_from_slice(&grad[o * total + start..o * total + start + chunk]);
            }
            grads.add(v, dv);
        }
        start += chunk;
    }
}

pub(crate) fn select_backward(
    in_shape: &[usize],
    x: Var,
    axis: usize,
    index: usize,
    grad: &[f64],
    grads: &mut Grads<'_>,
) {
    let outer: usize = in_shape[..axis].iter().product();
    let dim = in_shape[axis];
    let inner: usize = in_shape[axis + 1..].iter().product();
    if let Some(slot) = grads.slot(x, outer * dim * inner) {
        for o in 0..outer {
            let dst = (o * dim + index) * inner;
            for i in 0..inner {
                slot[dst + i] += grad[o * inner + i];
            }
        }
    }
}

impl Graph {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        let n: usize = shape.iter().product();
        if n != xt.numel() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", xt.shape()),
            ));
        }
        let data = xt.data().to_vec();
        self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape { x }, "reshape")
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        let r = xt.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", format!("{axes:?} is not a permutation of {r} axes")));
        }
        let in_strides = strides(xt.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| xt.shape()[a]).collect();
        let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = xt.numel();
        let mut source = Vec::with_capacity(n);
        let mut idx = vec![0usize; r];
        let mut off = 0usize;
        for _ in 0..n {
            source.push(off);
            for d in (0..r).rev() {
                idx[d] += 1;
                off += eff[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                off -= eff[d] * idx[d];
                idx[d] = 0;
            }
        }
        let data = source.iter().map(|&s| xt.data()[s]).collect();
        self.push(Tensor::from_parts(out_shape, data), Op::Permute { x, source }, "permute")
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut shape = base.clone();
        shape[axis] = inputs.iter().map(|&v| self.shape(v)[axis]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            "concat",
        )
    }

    /// Stacks equally shaped tensors along a new axis.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::InvalidArgument("stack of zero tensors".into()));
        };
        let mut shape = self.shape(first).to_vec();
        if axis > shape.len() {
            return Err(Error::shape("stack", format!("axis {axis} out of range for {shape:?}")));
        }
        shape.insert(axis, 1);
        let expanded = inputs
            .iter()
            .map(|&v| self.reshape(v, &shape))
            .collect::<Result<Vec<_>>>()?;
        self.concat(&expanded, axis)
    }

    /// Takes index `index` along `axis`, dropping that axis.
    pub fn select(&mut self, x: Var, axis: usize, index: usize) -> Result<Var> {
        let xt = self.value(x);
        let s = xt.shape();
        if axis >= s.len() || index >= s[axis] {
            return Err(Error::shape("select", format!("index {index} on axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let dim = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let src = (o * dim + index) * inner;
            data.extend_from_slice(&xt.data()[src..src + inner]);
        }
        let mut shape = s.to_vec();
        shape.remove(axis);
        self.push(Tensor::from_parts(shape, data), Op::Select { x, axis, index }, "select")
    }

    /// Expands size-1 axes (right-aligned) to `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if broadcast_shape(&xs, shape).as_deref() != Some(shape) {
            return Err(Error::shape("broadcast_to", format!("{xs:?} does not broadcast to {shape:?}")));
        }
        let source = broadcast_source(shape, &xs);
        let data = source.iter().map(|&s| self.value(x).data()[s]).collect();
        self.push(Tensor::from_parts(shape.to_vec(), data), Op::Broadcast { x, source }, "broadcast_to")
    }

    /// Arithmetic mean over `axes`. Reduced axes are dropped unless
    /// `keepdim`, in which case they remain with extent 1.
    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let xt = self.value(x);
        let s = xt.shape().to_vec();
        let r = s.len();
        if axes.iter().any(|&a| a >= r) {
            return Err(Error::shape("mean", format!("axes {axes:?} out of range for {s:?}")));
        }
        let reduced: Vec<bool> = (0..r).map(|d| axes.contains(&d)).collect();
        let kept: Vec<usize> = (0..r).map(|d| if reduced[d] { 1 } else { s[d] }).collect();
        let kept_strides = strides(&kept);
        let eff: Vec<usize> = (0..r).map(|d| if reduced[d] { 0 } else { kept_strides[d] }).collect();
        let count: usize = (0..r).filter(|&d| reduced[d]).map(|d| s[d]).product();
        let n = xt.numel();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; r];
        let mut off = 0usize;
        for _ in 0..n {
            map.push(off);
            for d in (0..r).rev() {
                idx[d] += 1;
                off += eff[d];
                if idx[d] < s[d] {
                    break;
                }
                off -= eff[d] * idx[d];
                idx[d] = 0;
            }
        }
        let mut means = vec![MeanAccumulator::default(); kept.iter().product()];
        for (&o, &v) in map.iter().zip(xt.data()) {
            means[o].add(v);
        }
        let out = means.iter().map(|m| m.value()).collect();
        let shape = if keepdim {
            kept
        } else {
            (0..r).filter(|&d| !reduced[d]).map(|d| s[d]).collect()
        };
        self.push(Tensor::from_parts(shape, out), Op::Mean { x, map, count }, "mean")
    }

    /// Mean over every element, as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean(x, &axes, false)
    }

    /// Row-wise gather: `out[i] = x[i, indices[i]]` for `x` of shape `[N, K]`.
    pub fn pick(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        let [n, k] = *xt.shape() else {
            return Err(Error::shape("pick", format!("input must be rank 2, got {:?}", xt.shape())));
        };
        if indices.len() != n || indices.iter().any(|&i| i >= k) {
            return Err(Error::shape("pick", format!("{} indices into [{n}, {k}]", indices.len())));
        }
        let data = indices.iter().enumerate().map(|(r, &c)| xt.data()[r * k + c]).collect();
        self.push(
            Tensor::from_parts(vec![n], data),
            Op::Pick {
                x,
                indices: indices.to_vec(),
            },
            "pick",
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iota(shape: &[usize]) -> Tensor {
        let n = shape.iter().product::<usize>();
        Tensor::new(shape.to_vec(), (0..n).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn mean_of_constant_and_of_iota() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full([2, 3, 4], 1.25));
        for axes in [vec![0], vec![1, 2], vec![0, 1, 2]] {
            let m = g.mean(c, &axes, false).unwrap();
            assert!(g.value(m).data().iter().all(|&v| v == 1.25));
        }
        for shape in [[4, 1], [1, 4], [2, 2]] {
            let x = g.constant(Tensor::new(shape, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
            let m = g.mean_all(x).unwrap();
            assert_eq!(g.value(m).item().unwrap(), 2.5);
        }
    }

    #[test]
    fn mean_gradient_is_reciprocal_count() {
        let mut g = Graph::new();
        let x = g.leaf(iota(&[2, 3, 4]), true);
        let m = g.mean(x, &[1], true).unwrap();
        assert_eq!(g.shape(m), &[2, 1, 4]);
        let l = g.mean_all(m).unwrap();
        g.backward(l).unwrap();
        for v in g.grad(x).unwrap().data() {
            assert!((v - 1.0 / 24.0).abs() < 1e-18);
        }
    }

    #[test]
    fn permute_moves_axes() {
        let mut g = Graph::new();
        let x = g.constant(iota(&[2, 3, 4]));
        let y = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(y), &[4, 2, 3]);
        assert_eq!(g.value(y).get(&[3, 1, 2]), g.value(x).get(&[1, 2, 3]));
        assert!(g.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn concat_select_stack() {
        let mut g = Graph::new();
        let a = g.constant(iota(&[2, 1, 3]));
        let b = g.constant(Tensor::full([2, 2, 3], -1.0));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 3]);
        assert_eq!(g.value(c).get(&[1, 0, 2]), 5.0);
        assert_eq!(g.value(c).get(&[1, 2, 2]), -1.0);
        let s = g.select(c, 1, 0).unwrap();
        assert_eq!(g.value(s), &iota(&[2, 3]));
        let st = g.stack(&[s, s], 1).unwrap();
        assert_eq!(g.shape(st), &[2, 2, 3]);
        assert_eq!(g.value(st).get(&[1, 1, 0]), 3.0);
    }

    #[test]
    fn broadcast_to_expands() {
        let mut g = Graph::new();
        let x = g.constant(iota(&[1, 3]));
        let y = g.broadcast_to(x, &[2, 3]).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0, 0.0, 1.0, 2.0]);
        assert!(g.broadcast_to(x, &[2, 4]).is_err());
    }

    #[test]
    fn pick_gathers_rows() {
        let mut g = Graph::new();
        let x = g.constant(iota(&[2, 3]));
        let y = g.pick(x, &[2, 0]).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 3.0]);
        assert!(g.pick(x, &[3, 0]).is_err());
    }
}
