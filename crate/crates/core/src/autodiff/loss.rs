//! Batch-hard triplet loss as a single graph op.

use super::{Grads, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{MeanAccumulator, Tensor};

/// Euclidean distance, summing squared differences in index order.
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

struct Term {
    anchor: usize,
    pos: usize,
    neg: usize,
    d_pos: f64,
    d_neg: f64,
}

pub(crate) struct TripletOp {
    pub(crate) x: Var,
    active: Vec<Term>,
    rows: usize,
}

impl TripletOp {
    pub(crate) fn backward(&self, g: &Graph, grad: &[f64], grads: &mut Grads<'_>) {
        let xt = g.value(self.x);
        let d = xt.shape()[1];
        let xd = xt.data();
        let Some(slot) = grads.slot(self.x, xd.len()) else {
            return;
        };
        let c = grad[0] / self.rows as f64;
        let row = |i: usize| &xd[i * d..(i + 1) * d];
        for t in &self.active {
            if t.d_pos > 0.0 {
                let (a, p) = (row(t.anchor), row(t.pos));
                for k in 0..d {
                    let u = c * (a[k] - p[k]) / t.d_pos;
                    slot[t.anchor * d + k] += u;
                    slot[t.pos * d + k] -= u;
                }
            }
            if t.d_neg > 0.0 {
                let (a, n) = (row(t.anchor), row(t.neg));
                for k in 0..d {
                    let v = c * (a[k] - n[k]) / t.d_neg;
                    slot[t.anchor * d + k] -= v;
                    slot[t.neg * d + k] += v;
                }
            }
        }
    }
}

impl Graph {
    /// Batch-hard triplet loss over the rows of `x` (`[B, d]`).
    ///
    /// For every anchor row, the hardest positive is the farthest row with
    /// the same label (the anchor itself included) and the hardest negative
    /// the nearest row with another label. Returns the mean over anchors of
    /// `max(0, margin + d_pos - d_neg)`. Ties go to the lowest row index;
    /// the hinge has zero slope at the kink.
    pub fn batch_hard_triplet(&mut self, x: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let xt = self.value(x);
        let [rows, d] = *xt.shape() else {
            return Err(Error::shape("batch_hard_triplet", format!("features must be [B, d], got {:?}", xt.shape())));
        };
        if labels.len() != rows {
            return Err(Error::shape(
                "batch_hard_triplet",
                format!("{} labels for {rows} rows", labels.len()),
            ));
        }
        if !(margin >= 0.0 && margin.is_finite()) {
            return Err(Error::InvalidArgument(format!("triplet margin {margin} must be finite and >= 0")));
        }
        if labels.iter().all(|&l| l == labels[0]) {
            return Err(Error::InvalidArgument(
                "batch-hard triplet needs at least two identities in the batch".into(),
            ));
        }
        let xd = xt.data();
        let row = |i: usize| &xd[i * d..(i + 1) * d];
        let mut total = MeanAccumulator::default();
        let mut active = Vec::new();
        let mut kinks = Vec::with_capacity(rows * 3);
        for a in 0..rows {
            let (mut pos, mut d_pos) = (a, f64::NEG_INFINITY);
            let (mut neg, mut d_neg) = (a, f64::INFINITY);
            for j in 0..rows {
                let dist = euclidean(row(a), row(j));
                if labels[j] == labels[a] {
                    if dist > d_pos {
                        (pos, d_pos) = (j, dist);
                    }
                } else if dist < d_neg {
                    (neg, d_neg) = (j, dist);
                }
            }
            let term = margin + d_pos - d_neg;
            kinks.extend([pos as u64, neg as u64, (term > 0.0) as u64]);
            total.add(term.max(0.0));
            if term > 0.0 {
                active.push(Term {
                    anchor: a,
                    pos,
                    neg,
                    d_pos,
                    d_neg,
                });
            }
        }
        self.record_kink(kinks);
        let loss = total.value();
        self.push(
            Tensor::scalar(loss),
            Op::Triplet(TripletOp { x, active, rows }),
            "batch_hard_triplet",
        )
    }
}
