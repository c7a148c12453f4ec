//! Finite-difference checking of reverse-mode gradients.
//!
//! Each checked coordinate compares the analytic derivative `a` with a
//! central difference quotient `n` using the relative error
//! `|a - n| / max(|a|, |n|, 1e-8)`.
//!
//! Programs containing ReLUs, clamps or hard-example mining are only
//! piecewise smooth. All perturbed evaluations run on kink-tracing graphs;
//! when their fingerprints differ the difference quotient straddles a kink
//! and the coordinate is reported as skipped rather than compared.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub mod suite;
pub use suite::{check_module, GradModule, SuiteShape};

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many coordinates per input (sampled without
    /// replacement); `None` checks every coordinate.
    pub max_coords: Option<usize>,
    /// Largest tolerated fraction of coordinates skipped at kinks.
    pub max_skip_fraction: f64,
    pub seed: u64,
    /// Use the fourth-order stencil
    /// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h` instead of the
    /// central difference. Its truncation error is `O(h^4)`, which allows
    /// a larger step and so less rounding noise.
    pub five_point: bool,
    /// When the stencil straddles a kink, retry up to this many times with
    /// the step divided by 10 before skipping the coordinate.
    pub kink_retries: u32,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            max_coords: None,
            max_skip_fraction: 0.25,
            seed: 0,
            five_point: false,
            kink_retries: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
    /// `(input, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub pass: bool,
}

impl GradcheckReport {
    /// Combines reports, e.g. across seeds.
    pub fn merge(mut self, other: &GradcheckReport) -> Self {
        if other.max_rel_err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
            self.worst = other.worst.or(self.worst);
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.pass = self.pass && other.pass;
        self
    }

    pub fn empty_pass() -> Self {
        Self {
            pass: true,
            ..Self::default()
        }
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Checks the gradient of the scalar program `f` with respect to each of
/// `inputs`.
///
/// `f` receives a fresh graph and one leaf per input, and must return a
/// scalar. It may close over mutable state (e.g. batch-norm running stats)
/// but must otherwise be a pure function of its inputs.
pub fn gradcheck<F>(mut f: F, inputs: &[Tensor], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v).cloned().expect("leaf grad")).collect();
    drop(g);

    let mut eval = |values: &[Tensor]| -> Result<(f64, u64)> {
        let mut g = Graph::with_kink_trace();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok((g.value(out).item()?, g.kink_fingerprint().unwrap_or(0)))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = input.data()[c];
            let offsets: &[f64] = if opts.five_point { &[2.0, 1.0, -1.0, -2.0] } else { &[1.0, -1.0] };
            let mut numeric = None;
            let mut step = opts.step;
            for _ in 0..=opts.kink_retries {
                let mut values = [0.0; 4];
                let mut kinks = [0u64; 4];
                for (j, &o) in offsets.iter().enumerate() {
                    work[i].data_mut()[c] = orig + o * step;
                    (values[j], kinks[j]) = eval(&work)?;
                }
                work[i].data_mut()[c] = orig;
                if kinks[..offsets.len()].iter().all(|&k| k == kinks[0]) {
                    numeric = Some(if opts.five_point {
                        (8.0 * (values[1] - values[2]) - (values[0] - values[3])) / (12.0 * step)
                    } else {
                        (values[0] - values[1]) / (2.0 * step)
                    });
                    break;
                }
                step /= 10.0;
            }
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            let err = relative_error(analytic[i].data()[c], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((i, c));
            }
        }
    }
    let total = report.checked + report.skipped;
    if total == 0 {
        return Err(Error::InvalidArgument("gradcheck over zero coordinates".into()));
    }
    report.pass = report.checked > 0
        && report.max_rel_err < opts.tol
        && (report.skipped as f64) <= opts.max_skip_fraction * total as f64;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(shape.to_vec(), 1.0, &mut rng)
    }

    /// Weighted sum `Σ r ⊙ y` with fixed random weights, so every output
    /// element contributes with a distinct sensitivity.
    fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
        let r = g.constant(rand_tensor(g.shape(y), seed));
        let p = g.mul(y, r)?;
        g.mean_all(p)
    }

    fn check(inputs: &[Tensor], f: impl FnMut(&mut Graph, &[Var]) -> Result<Var>) -> GradcheckReport {
        let r = gradcheck(f, inputs, &GradcheckOptions::default()).unwrap();
        assert!(r.pass, "{r:?}");
        r
    }

    #[test]
    fn linear_function_is_exact() {
        let x = rand_tensor(&[6], 1);
        let r = check(&[x], |g, v| {
            let y = g.scale(v[0], 3.5)?;
            project(g, y, 2)
        });
        assert!(r.max_rel_err < 1e-9, "{r:?}");
    }

    #[test]
    fn conv2d_gradients() {
        for seed in 0..5 {
            let x = rand_tensor(&[2, 3, 5, 4], seed);
            let w = rand_tensor(&[4, 3, 3, 3], seed + 100);
            let b = rand_tensor(&[4], seed + 200);
            check(&[x, w, b], |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
                project(g, y, 9)
            });
        }
    }

    #[test]
    fn conv3d_gradients() {
        for seed in 0..5 {
            let x = rand_tensor(&[2, 3, 3, 4, 3], seed);
            let w = rand_tensor(&[2, 3, 3, 3, 3], seed + 100);
            let b = rand_tensor(&[2], seed + 200);
            check(&[x, w, b], |g, v| {
                let y = g.conv3d(v[0], v[1], Some(v[2]), 1, 1)?;
                project(g, y, 9)
            });
        }
    }

    #[test]
    fn batch_norm_gradients() {
        use crate::autodiff::{BnOptions, Mode, RunningStats};
        for mode in [Mode::Train, Mode::Eval] {
            for seed in 0..5 {
                let x = rand_tensor(&[3, 4, 5], seed);
                let gamma = rand_tensor(&[4], seed + 1);
                let beta = rand_tensor(&[4], seed + 2);
                let mut rs = RunningStats::new(4);
                rs.var.iter_mut().for_each(|v| *v = 2.0);
                check(&[x, gamma, beta], |g, v| {
                    let y = g.batch_norm(v[0], v[1], v[2], &mut rs, BnOptions::new(1, mode))?;
                    project(g, y, 5)
                });
            }
        }
    }

    #[test]
    fn dense_and_pointwise_gradients() {
        for seed in 0..5 {
            let x = rand_tensor(&[3, 5], seed);
            let w = rand_tensor(&[4, 5], seed + 1);
            let b = rand_tensor(&[4], seed + 2);
            check(&[x, w, b], |g, v| {
                let y = g.dense(v[0], v[1], Some(v[2]))?;
                let s = g.sigmoid(y)?;
                let r = g.relu(y)?;
                let m = g.mul(s, r)?;
                let sm = g.softmax(m, 1)?;
                let c = g.clamp(sm, 0.05, 0.9)?;
                let l = g.log(c)?;
                let d = g.dropout(l, 0.3, 11, crate::autodiff::Mode::Train)?;
                project(g, d, 3)
            });
        }
    }

    #[test]
    fn layout_op_gradients() {
        for seed in 0..5 {
            let a = rand_tensor(&[2, 3, 4], seed);
            let b = rand_tensor(&[1, 3, 1], seed + 1);
            let z = rand_tensor(&[2, 3, 4], seed + 2);
            check(&[a, b, z], |g, v| {
                let p = g.permute(v[0], &[1, 0, 2])?;
                let q = g.permute(p, &[1, 0, 2])?;
                let m = g.mul(q, v[1])?;
                let s = g.sub(m, v[0])?;
                let zs = g.sigmoid(v[2])?;
                let bl = g.blend(zs, s, q)?;
                let c = g.concat(&[bl, q], 2)?;
                let sel = g.select(c, 1, 2)?;
                let bb = g.broadcast_to(v[1], &[2, 3, 4])?;
                let st = g.stack(&[sel, sel], 0)?;
                let mean = g.mean(bb, &[0, 2], false)?;
                let ls = g.log_softmax(st, 2)?;
                let picked = g.reshape(ls, &[4, 8])?;
                let pk = g.pick(picked, &[0, 3, 7, 1])?;
                let l1 = project(g, pk, 4)?;
                let l2 = project(g, mean, 5)?;
                g.add(l1, l2)
            });
        }
    }
}
