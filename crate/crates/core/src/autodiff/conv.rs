//! 2D and 3D cross-correlation via im2col + GEMM.
//!
//! Both public entry points lower to one 3D kernel over `[N, C, T, H, W]`
//! inputs; a 2D convolution is the `T = 1`, `kt = 1` special case.

use super::gemm::gemm;
use super::{Grads, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stride and zero padding along the (T, H, W) axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn uniform3d(stride: usize, pad: usize) -> Self {
        Self {
            stride: [stride; 3],
            pad: [pad; 3],
        }
    }

    pub fn uniform2d(stride: usize, pad: usize) -> Self {
        Self {
            stride: [1, stride, stride],
            pad: [0, pad, pad],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    n: usize,
    ci: usize,
    co: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
}

impl Dims {
    fn k(&self) -> usize {
        self.ci * self.kernel.iter().product::<usize>()
    }

    fn p(&self) -> usize {
        self.output.iter().product()
    }

    fn in_len(&self) -> usize {
        self.ci * self.input.iter().product::<usize>()
    }

    fn out_len(&self) -> usize {
        self.co * self.p()
    }
}

pub(crate) struct ConvOp {
    x: Var,
    w: Var,
    b: Option<Var>,
    geom: ConvGeom,
    dims: Dims,
}

impl ConvOp {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        let mut v = vec![self.x, self.w];
        v.extend(self.b);
        v
    }

    fn pointwise(&self) -> bool {
        self.dims.kernel == [1, 1, 1] && self.geom.stride == [1, 1, 1] && self.geom.pad == [0; 3]
    }

    pub(crate) fn backward(&self, g: &Graph, grad: &[f64], grads: &mut Grads<'_>) {
        let d = self.dims;
        let (k, p) = (d.k(), d.p());
        let x = g.value(self.x).data();
        let w = g.value(self.w).data();
        let want_w = grads.wants(self.w);
        let want_x = grads.wants(self.x);
        let mut dw = if want_w { vec![0.0; d.co * k] } else { Vec::new() };
        let mut dx = if want_x { vec![0.0; d.n * d.in_len()] } else { Vec::new() };
        let pointwise = self.pointwise();
        let mut col = if pointwise { Vec::new() } else { vec![0.0; k * p] };
        let mut dcol = if pointwise || !want_x { Vec::new() } else { vec![0.0; k * p] };
        for n in 0..d.n {
            let xn = &x[n * d.in_len()..(n + 1) * d.in_len()];
            let gn = &grad[n * d.out_len()..(n + 1) * d.out_len()];
            if want_w {
                let col_ref: &[f64] = if pointwise {
                    xn
                } else {
                    im2col(xn, &d, &self.geom, &mut col);
                    &col
                };
                gemm(d.co, p, k, gn, false, col_ref, true, &mut dw, 1.0);
            }
            if want_x {
                let dxn = &mut dx[n * d.in_len()..(n + 1) * d.in_len()];
                if pointwise {
                    gemm(k, d.co, p, w, true, gn, false, dxn, 1.0);
                } else {
                    gemm(k, d.co, p, w, true, gn, false, &mut dcol, 0.0);
                    col2im(&dcol, &d, &self.geom, dxn);
                }
            }
        }
        if want_w {
            grads.add(self.w, dw);
        }
        if want_x {
            grads.add(self.x, dx);
        }
        if let Some(b) = self.b {
            if grads.wants(b) {
                let mut db = vec![0.0; d.co];
                for n in 0..d.n {
                    for (c, acc) in db.iter_mut().enumerate() {
                        let start = n * d.out_len() + c * p;
                        *acc += grad[start..start + p].iter().sum::<f64>();
                    }
                }
                grads.add(b, db);
            }
        }
    }
}

fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

fn im2col(x: &[f64], d: &Dims, geom: &ConvGeom, col: &mut [f64]) {
    let [t, h, w] = d.input;
    let [kt, kh, kw] = d.kernel;
    let [ot_n, oh_n, ow_n] = d.output;
    let [st, sh, sw] = geom.stride;
    let [pt, ph, pw] = geom.pad;
    let p = d.p();
    for c in 0..d.ci {
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let row = ((c * kt + dt) * kh + dh) * kw + dw;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for ot in 0..ot_n {
                        let it = (ot * st + dt) as isize - pt as isize;
                        for oh in 0..oh_n {
                            let ih = (oh * sh + dh) as isize - ph as isize;
                            let base = (ot * oh_n + oh) * ow_n;
                            let out = &mut dst[base..base + ow_n];
                            if it < 0 || it >= t as isize || ih < 0 || ih >= h as isize {
                                out.fill(0.0);
                                continue;
                            }
                            let src = ((c * t + it as usize) * h + ih as usize) * w;
                            for (ow, o) in out.iter_mut().enumerate() {
                                let iw = (ow * sw + dw) as isize - pw as isize;
                                *o = if iw >= 0 && iw < w as isize {
                                    x[src + iw as usize]
                                } else {
                                    0.0
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], d: &Dims, geom: &ConvGeom, dx: &mut [f64]) {
    let [t, h, w] = d.input;
    let [kt, kh, kw] = d.kernel;
    let [ot_n, oh_n, ow_n] = d.output;
    let [st, sh, sw] = geom.stride;
    let [pt, ph, pw] = geom.pad;
    let p = d.p();
    for c in 0..d.ci {
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let row = ((c * kt + dt) * kh + dh) * kw + dw;
                    let src_row = &col[row * p..(row + 1) * p];
                    for ot in 0..ot_n {
                        let it = (ot * st + dt) as isize - pt as isize;
                        if it < 0 || it >= t as isize {
                            continue;
                        }
                        for oh in 0..oh_n {
                            let ih = (oh * sh + dh) as isize - ph as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let base = (ot * oh_n + oh) * ow_n;
                            let dst = ((c * t + it as usize) * h + ih as usize) * w;
                            for (ow, &v) in src_row[base..base + ow_n].iter().enumerate() {
                                let iw = (ow * sw + dw) as isize - pw as isize;
                                if iw >= 0 && iw < w as isize {
                                    dx[dst + iw as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// 2D cross-correlation. `x` is `[C_in, H, W]` or `[N, C_in, H, W]`,
    /// `w` is `[C_out, C_in, kh, kw]`, `b` is `[C_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("weight must be rank 4, got {ws:?}")));
        }
        let (x5, batched) = match xs.as_slice() {
            [c, h, wd] => (self.reshape(x, &[1, *c, 1, *h, *wd])?, false),
            [n, c, h, wd] => (self.reshape(x, &[*n, *c, 1, *h, *wd])?, true),
            _ => return Err(Error::shape("conv2d", format!("input must be rank 3 or 4, got {xs:?}"))),
        };
        let w5 = self.reshape(w, &[ws[0], ws[1], 1, ws[2], ws[3]])?;
        let y = self.conv_nd(x5, w5, b, ConvGeom::uniform2d(stride, pad), "conv2d")?;
        let ys = self.shape(y).to_vec();
        let out: Vec<usize> = if batched {
            vec![ys[0], ys[1], ys[3], ys[4]]
        } else {
            vec![ys[1], ys[3], ys[4]]
        };
        self.reshape(y, &out)
    }

    /// 3D cross-correlation. `x` is `[C_in, T, H, W]` or `[N, C_in, T, H, W]`,
    /// `w` is `[C_out, C_in, kt, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        self.conv3d_geom(x, w, b, ConvGeom::uniform3d(stride, pad))
    }

    pub fn conv3d_geom(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        match self.shape(x).len() {
            5 => self.conv_nd(x, w, b, geom, "conv3d"),
            4 => {
                let xs = self.shape(x).to_vec();
                let mut s5 = vec![1];
                s5.extend(&xs);
                let x5 = self.reshape(x, &s5)?;
                let y = self.conv_nd(x5, w, b, geom, "conv3d")?;
                let ys = self.shape(y)[1..].to_vec();
                self.reshape(y, &ys)
            }
            _ => Err(Error::shape(
                "conv3d",
                format!("input must be rank 4 or 5, got {:?}", self.shape(x)),
            )),
        }
    }

    fn conv_nd(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, name: &'static str) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 5 {
            return Err(Error::shape(name, format!("weight must be rank 5, got {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                name,
                format!("input has {} channels, weight expects {}", xs[1], ws[1]),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(
                    name,
                    format!("bias shape {:?}, expected [{}]", self.shape(b), ws[0]),
                ));
            }
        }
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = out_extent(xs[2 + a], ws[2 + a], geom.stride[a], geom.pad[a]).ok_or_else(|| {
                Error::shape(
                    name,
                    format!(
                        "kernel {:?} does not fit input {:?} with stride {:?} pad {:?}",
                        &ws[2..],
                        &xs[2..],
                        geom.stride,
                        geom.pad
                    ),
                )
            })?;
        }
        let dims = Dims {
            n: xs[0],
            ci: xs[1],
            co: ws[0],
            input: [xs[2], xs[3], xs[4]],
            kernel: [ws[2], ws[3], ws[4]],
            output,
        };
        let op = ConvOp { x, w, b, geom, dims };
        let (k, p) = (dims.k(), dims.p());
        let mut out = vec![0.0; dims.n * dims.out_len()];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = b.map(|b| self.value(b).data());
            let mut col = if op.pointwise() { Vec::new() } else { vec![0.0; k * p] };
            for n in 0..dims.n {
                let xn = &xd[n * dims.in_len()..(n + 1) * dims.in_len()];
                let on = &mut out[n * dims.out_len()..(n + 1) * dims.out_len()];
                let col_ref: &[f64] = if op.pointwise() {
                    xn
                } else {
                    im2col(xn, &dims, &geom, &mut col);
                    &col
                };
                gemm(dims.co, k, p, wd, false, col_ref, false, on, 0.0);
                if let Some(bd) = bd {
                    for (c, &bv) in bd.iter().enumerate() {
                        for v in &mut on[c * p..(c + 1) * p] {
                            *v += bv;
                        }
                    }
                }
            }
        }
        let shape = vec![dims.n, dims.co, output[0], output[1], output[2]];
        self.push(Tensor::from_parts(shape, out), Op::Conv(op), name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct quadruple loop over output positions and kernel taps.
    fn reference_conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros([co, ho, wo]);
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (i * stride + u) as isize - pad as isize;
                                let s = (j * stride + v) as isize - pad as isize;
                                if r >= 0 && s >= 0 && (r as usize) < h && (s as usize) < wd {
                                    acc += x.get(&[c, r as usize, s as usize]) * w.get(&[o, c, u, v]);
                                }
                            }
                        }
                    }
                    out.set(&[o, i, j], acc + b.data()[o]);
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let xt = Tensor::randn([1, 5, 4], 1.0, &mut rng);
        let x = g.constant(xt.clone());
        let w = g.constant(Tensor::ones([1, 1, 1, 1]));
        let b = g.constant(Tensor::zeros([1]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn constant_input_all_ones_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 6, 5], 0.7));
        let w = g.constant(Tensor::ones([1, 1, 3, 3]));
        let y = g.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 4, 3]);
        for v in g.value(y).data() {
            assert!((v - 9.0 * 0.7).abs() < 1e-12);
        }

        let x3 = g.constant(Tensor::full([1, 4, 5, 5], 0.7));
        let w3 = g.constant(Tensor::ones([1, 1, 3, 3, 3]));
        let y3 = g.conv3d(x3, w3, None, 1, 0).unwrap();
        assert_eq!(g.shape(y3), &[1, 2, 3, 3]);
        for v in g.value(y3).data() {
            assert!((v - 27.0 * 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn conv3d_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let xt = Tensor::randn([1, 3, 4, 2], 1.0, &mut rng);
        let x = g.constant(xt.clone());
        let w = g.constant(Tensor::ones([1, 1, 1, 1, 1]));
        let y = g.conv3d(x, w, None, 1, 0).unwrap();
        assert_eq!(g.value(y), &xt);
    }

    #[test]
    fn matches_reference_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        use rand::Rng;
        for _ in 0..40 {
            let ci = rng.random_range(1..=4);
            let co = rng.random_range(1..=4);
            let h = rng.random_range(3..=8);
            let w = rng.random_range(3..=8);
            let k = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=1);
            let xt = Tensor::randn([ci, h, w], 1.0, &mut rng);
            let wt = Tensor::randn([co, ci, k, k], 1.0, &mut rng);
            let bt = Tensor::randn([co], 1.0, &mut rng);
            let mut g = Graph::new();
            let (x, wv, b) = (g.constant(xt.clone()), g.constant(wt.clone()), g.constant(bt.clone()));
            let y = g.conv2d(x, wv, Some(b), stride, pad).unwrap();
            let want = reference_conv2d(&xt, &wt, &bt, stride, pad);
            assert_eq!(g.shape(y), want.shape());
            assert!(g.value(y).max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_oversized_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([2, 4, 4]));
        let w = g.constant(Tensor::zeros([1, 3, 3, 3]));
        assert!(matches!(g.conv2d(x, w, None, 1, 0), Err(Error::Shape { .. })));
        let w = g.constant(Tensor::zeros([1, 2, 5, 5]));
        assert!(g.conv2d(x, w, None, 1, 0).is_err());
        assert!(g.conv2d(x, w, None, 1, 1).is_ok());
        assert!(g.conv2d(x, w, None, 0, 1).is_err());
    }
}
