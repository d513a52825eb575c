//! Forward and backward kernels for the heavier tensor operations.

use super::tensor::Tensor;
use crate::scalar::{matmul, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(c_in: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        assert!(h + 2 * pad >= k && w + 2 * pad >= k, "kernel larger than padded input");
        Self {
            c_in,
            h,
            w,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (ho, wo) = (g.h_out, g.w_out);
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy as usize >= g.h {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix as usize >= g.w {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, dx: &mut [T]) {
    let (ho, wo) = (g.h_out, g.w_out);
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            line[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x: [n, ci, h, w]`, `w: [co, ci, k, k]`, `b: [1, co, 1, 1]`.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let [n, ci, h, w] = x.shape();
    let [co, wci, k, k2] = weight.shape();
    assert_eq!(ci, wci, "conv channel mismatch");
    assert_eq!(k, k2, "square kernels only");
    let g = ConvGeometry::new(ci, h, w, k, stride, pad);
    let mut out = Tensor::zeros([n, co, g.h_out, g.w_out]);
    let plane_in = ci * h * w;
    let plane_out = co * g.col_cols();
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * g.col_cols()]
    };
    for b in 0..n {
        let xb = &x.data()[b * plane_in..(b + 1) * plane_in];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut cols);
            &cols
        };
        let ob = &mut out.data_mut()[b * plane_out..(b + 1) * plane_out];
        matmul(co, g.col_rows(), g.col_cols(), weight.data(), false, src, false, ob, T::one(), T::zero());
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                ob[o * g.col_cols()..(o + 1) * g.col_cols()]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dout: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let [n, ci, h, w] = x.shape();
    let [co, _, k, _] = weight.shape();
    let g = ConvGeometry::new(ci, h, w, k, stride, pad);
    let plane_in = ci * h * w;
    let plane_out = co * g.col_cols();
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(weight.shape()));
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { g.col_rows() * g.col_cols() }];
    let mut dcols = vec![T::zero(); if need_dx && !g.is_pointwise() { g.col_rows() * g.col_cols() } else { 0 }];
    for b in 0..n {
        let db_out = &dout.data()[b * plane_out..(b + 1) * plane_out];
        let xb = &x.data()[b * plane_in..(b + 1) * plane_in];
        if let Some(dw) = dw.as_mut() {
            let src: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, &g, &mut cols);
                &cols
            };
            // dW (co x rows) += dout (co x cols) * src^T (cols x rows)
            matmul(co, g.col_cols(), g.col_rows(), db_out, false, src, true, dw.data_mut(), T::one(), T::one());
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx.data_mut()[b * plane_in..(b + 1) * plane_in];
            if g.is_pointwise() {
                matmul(g.col_rows(), co, g.col_cols(), weight.data(), true, db_out, false, dxb, T::one(), T::one());
            } else {
                matmul(g.col_rows(), co, g.col_cols(), weight.data(), true, db_out, false, &mut dcols, T::one(), T::zero());
                col2im(&dcols, &g, dxb);
            }
        }
    }
    let db = need_db.then(|| {
        let mut db = Tensor::zeros([1, co, 1, 1]);
        let hw = g.col_cols();
        for b in 0..n {
            for o in 0..co {
                let s: T = dout.data()[b * plane_out + o * hw..b * plane_out + (o + 1) * hw]
                    .iter()
                    .copied()
                    .sum();
                db.data_mut()[o] += s;
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}

pub fn upsample2_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let src = x.data();
    let dst = out.data_mut();
    for p in 0..n * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[p * 4 * h * w + y * 2 * w + xx] = src[p * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dout: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = dout.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    let src = dout.data();
    let dst = dx.data_mut();
    for p in 0..n * c {
        for y in 0..h2 {
            for xx in 0..w2 {
                dst[p * h * w + (y / 2) * w + xx / 2] += src[p * h2 * w2 + y * w2 + xx];
            }
        }
    }
    dx
}

/// Group statistics saved for the backward pass.
pub struct GroupNormSaved<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn group_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: T,
) -> (Tensor<T>, GroupNormSaved<T>) {
    let [n, c, h, w] = x.shape();
    assert!(c % groups == 0, "channels not divisible by groups");
    let cpg = c / groups;
    let len = cpg * h * w;
    let count = T::from_usize_lossy(len);
    let mut out = Tensor::zeros(x.shape());
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for b in 0..n {
        for gi in 0..groups {
            let off = (b * c + gi * cpg) * h * w;
            let seg = &x.data()[off..off + len];
            let m = seg.iter().copied().sum::<T>() / count;
            let var = seg.iter().map(|&v| (v - m) * (v - m)).sum::<T>() / count;
            let r = T::one() / (var + eps).sqrt();
            mean.push(m);
            rstd.push(r);
            for ch in 0..cpg {
                let cidx = gi * cpg + ch;
                let (gm, bt) = (gamma.data()[cidx], beta.data()[cidx]);
                let base = off + ch * h * w;
                for i in 0..h * w {
                    out.data_mut()[base + i] = (x.data()[base + i] - m) * r * gm + bt;
                }
            }
        }
    }
    (out, GroupNormSaved { mean, rstd })
}

pub fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    groups: usize,
    saved: &GroupNormSaved<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = x.shape();
    let cpg = c / groups;
    let hw = h * w;
    let count = T::from_usize_lossy(cpg * hw);
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros([1, c, 1, 1]);
    let mut dbeta = Tensor::zeros([1, c, 1, 1]);
    for b in 0..n {
        for gi in 0..groups {
            let (m, r) = (saved.mean[b * groups + gi], saved.rstd[b * groups + gi]);
            let off = (b * c + gi * cpg) * hw;
            let (mut sum_dxhat, mut sum_dxhat_xhat) = (T::zero(), T::zero());
            for ch in 0..cpg {
                let cidx = gi * cpg + ch;
                let gm = gamma.data()[cidx];
                for i in 0..hw {
                    let idx = off + ch * hw + i;
                    let xhat = (x.data()[idx] - m) * r;
                    let dy = dout.data()[idx];
                    dgamma.data_mut()[cidx] += dy * xhat;
                    dbeta.data_mut()[cidx] += dy;
                    sum_dxhat += dy * gm;
                    sum_dxhat_xhat += dy * gm * xhat;
                }
            }
            let mean_dxhat = sum_dxhat / count;
            let mean_dxhat_xhat = sum_dxhat_xhat / count;
            for ch in 0..cpg {
                let gm = gamma.data()[gi * cpg + ch];
                for i in 0..hw {
                    let idx = off + ch * hw + i;
                    let xhat = (x.data()[idx] - m) * r;
                    let dxhat = dout.data()[idx] * gm;
                    dx.data_mut()[idx] = r * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Single-head spatial self-attention over `h*w` tokens with `c`-dim keys.
///
/// Returns the output and the attention probabilities `[n, L, L]` (flattened).
pub fn attention_forward<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let [n, c, h, w] = q.shape();
    let l = h * w;
    let scale = T::one() / T::from_usize_lossy(c).sqrt();
    let mut out = Tensor::zeros(q.shape());
    let mut probs = vec![T::zero(); n * l * l];
    for b in 0..n {
        let qb = &q.data()[b * c * l..(b + 1) * c * l];
        let kb = &k.data()[b * c * l..(b + 1) * c * l];
        let vb = &v.data()[b * c * l..(b + 1) * c * l];
        let p = &mut probs[b * l * l..(b + 1) * l * l];
        // scores (L x L) = q^T (L x c) * k (c x L)
        matmul(l, c, l, qb, true, kb, false, p, scale, T::zero());
        for row in p.chunks_mut(l) {
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        // out (c x L) = v (c x L) * P^T (L x L)
        let ob = &mut out.data_mut()[b * c * l..(b + 1) * c * l];
        matmul(c, l, l, vb, false, p, true, ob, T::one(), T::zero());
    }
    (out, probs)
}

pub fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = q.shape();
    let l = h * w;
    let scale = T::one() / T::from_usize_lossy(c).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut dp = vec![T::zero(); l * l];
    for b in 0..n {
        let r = b * c * l..(b + 1) * c * l;
        let (qb, kb, vb, gb) = (&q.data()[r.clone()], &k.data()[r.clone()], &v.data()[r.clone()], &dout.data()[r.clone()]);
        let p = &probs[b * l * l..(b + 1) * l * l];
        // dV (c x L) = dout (c x L) * P (L x L)
        matmul(c, l, l, gb, false, p, false, &mut dv.data_mut()[r.clone()], T::one(), T::zero());
        // dP (L x L) = dout^T (L x c) * v (c x L)
        matmul(l, c, l, gb, true, vb, false, &mut dp, T::one(), T::zero());
        // softmax backward, in place: dS = P * (dP - rowsum(dP * P))
        for i in 0..l {
            let row_p = &p[i * l..(i + 1) * l];
            let row_d = &mut dp[i * l..(i + 1) * l];
            let dot: T = row_p.iter().zip(row_d.iter()).map(|(&a, &b)| a * b).sum();
            for (d, &pp) in row_d.iter_mut().zip(row_p) {
                *d = pp * (*d - dot);
            }
        }
        // dQ (c x L) = k (c x L) * dS^T (L x L) * scale
        matmul(c, l, l, kb, false, &dp, true, &mut dq.data_mut()[r.clone()], scale, T::zero());
        // dK (c x L) = q (c x L) * dS (L x L) * scale
        matmul(c, l, l, qb, false, &dp, false, &mut dk.data_mut()[r.clone()], scale, T::zero());
    }
    (dq, dk, dv)
}
