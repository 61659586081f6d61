//! Dense numeric kernels used by the autograd graph.
//!
//! Every batched kernel processes samples independently, so the result for a
//! sample never depends on which other samples share the batch. Weight sharing
//! across folded frames relies on this: a frame computed inside a video batch
//! is bitwise equal to the same frame computed alone.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis, Zip};
use rayon::prelude::*;

use crate::scalar::Scalar;

pub const GROUP_NORM_EPS: f64 = 1e-5;

pub fn conv_out_size(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad` lies inside `[0, w)`.
fn valid_range(w: usize, wo: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).div_ceil(stride);
    let hi = if w + pad > kx { ((w + pad - kx - 1) / stride + 1).min(wo) } else { 0 };
    (lo, hi.max(lo))
}

/// Unrolls the receptive fields of one (C, H, W) image into columns.
pub fn im2col<T: Scalar>(x: ArrayView3<T>, kernel: usize, stride: usize, pad: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let ho = conv_out_size(h, kernel, stride, pad);
    let wo = conv_out_size(w, kernel, stride, pad);
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("standard layout");
    let mut buf = vec![T::zero(); c * kernel * kernel * ho * wo];
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let (lo, hi) = valid_range(w, wo, kx, stride, pad);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[(ci * h + iy as usize) * w..][..w];
                    let drow = &mut buf[(row * ho + oy) * wo..][..wo];
                    if stride == 1 {
                        drow[lo..hi].copy_from_slice(&srow[lo + kx - pad..hi + kx - pad]);
                    } else {
                        for ox in lo..hi {
                            drow[ox] = srow[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * kernel * kernel, ho * wo), buf).expect("column buffer size")
}

/// Adjoint of [`im2col`]: scatters columns back into an image, summing overlaps.
pub fn col2im<T: Scalar>(
    col: ArrayView2<T>,
    (c, h, w): (usize, usize, usize),
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Array3<T> {
    let ho = conv_out_size(h, kernel, stride, pad);
    let wo = conv_out_size(w, kernel, stride, pad);
    let cs = col.as_standard_layout();
    let src = cs.as_slice().expect("standard layout");
    let mut buf = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (ci * kernel + ky) * kernel + kx;
                let (lo, hi) = valid_range(w, wo, kx, stride, pad);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let srow = &src[(row * ho + oy) * wo..][..wo];
                    let drow = &mut buf[(ci * h + iy as usize) * w..][..w];
                    if stride == 1 {
                        for (d, &v) in drow[lo + kx - pad..hi + kx - pad].iter_mut().zip(&srow[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            drow[ox * stride + kx - pad] += srow[ox];
                        }
                    }
                }
            }
        }
    }
    Array3::from_shape_vec((c, h, w), buf).expect("image buffer size")
}

fn weight_matrix<T: Scalar>(w: ArrayView4<'_, T>) -> ArrayView2<'_, T> {
    let (co, ci, kh, kw) = w.dim();
    w.into_shape_with_order((co, ci * kh * kw))
        .expect("conv weights are stored contiguously")
}

pub fn conv2d_forward<T: Scalar>(
    x: ArrayView4<T>,
    w: ArrayView4<T>,
    b: Option<ArrayView1<T>>,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (n, _, h, wd) = x.dim();
    let (co, _, k, _) = w.dim();
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(wd, k, stride, pad);
    let wm = weight_matrix(w);
    let per_sample: Vec<Array2<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let col = im2col(x.index_axis(Axis(0), i), k, stride, pad);
            let mut y = wm.dot(&col);
            if let Some(b) = b {
                for (mut row, &bias) in y.outer_iter_mut().zip(b.iter()) {
                    row.mapv_inplace(|v| v + bias);
                }
            }
            y
        })
        .collect();
    let mut out = Vec::with_capacity(n * co * ho * wo);
    for y in per_sample {
        out.extend_from_slice(standard(y).as_slice().expect("standard layout"));
    }
    Array4::from_shape_vec((n, co, ho, wo), out).expect("conv output size")
}

pub struct ConvGrads<T> {
    pub dx: Option<Array4<T>>,
    pub dw: Option<Array4<T>>,
    pub db: Option<Array1<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    x: ArrayView4<T>,
    w: ArrayView4<T>,
    dy: ArrayView4<T>,
    stride: usize,
    pad: usize,
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_dx, need_dw, need_db) = need;
    let (n, ci, h, wd) = x.dim();
    let (co, _, k, _) = w.dim();
    let (_, _, ho, wo) = dy.dim();
    let wm = weight_matrix(w);
    let per_sample: Vec<(Option<Array3<T>>, Option<Array2<T>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dyi = dy
                .index_axis(Axis(0), i)
                .to_owned()
                .into_shape_with_order((co, ho * wo))
                .expect("conv grad reshape");
            let dx = need_dx.then(|| {
                let dcol = wm.t().dot(&dyi);
                col2im(dcol.view(), (ci, h, wd), k, stride, pad)
            });
            let dw = need_dw.then(|| {
                let col = im2col(x.index_axis(Axis(0), i), k, stride, pad);
                dyi.dot(&col.t())
            });
            (dx, dw)
        })
        .collect();
    let mut dx = need_dx.then(|| Array4::<T>::zeros((n, ci, h, wd)));
    let mut dw = need_dw.then(|| Array2::<T>::zeros((co, ci * k * k)));
    for (i, (dxi, dwi)) in per_sample.into_iter().enumerate() {
        if let (Some(dx), Some(dxi)) = (dx.as_mut(), dxi) {
            dx.index_axis_mut(Axis(0), i).assign(&dxi);
        }
        if let (Some(dw), Some(dwi)) = (dw.as_mut(), dwi) {
            *dw += &dwi;
        }
    }
    let db = need_db.then(|| {
        let mut db = Array1::<T>::zeros(co);
        for i in 0..n {
            for c in 0..co {
                db[c] += dy.slice(s![i, c, .., ..]).sum();
            }
        }
        db
    });
    ConvGrads {
        dx,
        dw: dw.map(|m| m.into_shape_with_order((co, ci, k, k)).expect("dw reshape")),
        db,
    }
}

/// Numerically stable row-wise softmax (max subtraction per row).
pub fn softmax_rows<T: Scalar>(m: ArrayView2<T>) -> Array2<T> {
    let mut out = m.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: T = row.iter().cloned().sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Scaled dot-product attention for one sample.
///
/// Returns the attended values `(Lq, dv)` and the attention weights `(Lq, Lk)`.
pub fn attention_forward<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    scale: T,
) -> (Array2<T>, Array2<T>) {
    let scores = q.dot(&k.t()) * scale;
    let probs = softmax_rows(scores.view());
    (probs.dot(&v), probs)
}

/// Gradients of [`attention_forward`] given the saved weights.
pub fn attention_backward<T: Scalar>(
    q: ArrayView2<T>,
    k: ArrayView2<T>,
    v: ArrayView2<T>,
    probs: ArrayView2<T>,
    dout: ArrayView2<T>,
    scale: T,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let dv = probs.t().dot(&dout);
    let dprobs = dout.dot(&v.t());
    let mut dscores = dprobs;
    for (mut drow, prow) in dscores.outer_iter_mut().zip(probs.outer_iter()) {
        let dot: T = drow.iter().zip(prow.iter()).map(|(&d, &p)| d * p).sum();
        Zip::from(&mut drow).and(&prow).for_each(|d, &p| *d = p * (*d - dot));
    }
    dscores *= scale;
    let dq = dscores.dot(&k);
    let dk = dscores.t().dot(&q);
    (dq, dk, dv)
}

/// Per-(sample, group) statistics for group normalization over `(N, C, L)`.
pub struct GroupStats<T> {
    pub mean: Array2<T>,
    pub rstd: Array2<T>,
}

pub fn group_norm_forward<T: Scalar>(
    x: ArrayView3<T>,
    gamma: ArrayView1<T>,
    beta: ArrayView1<T>,
    groups: usize,
) -> (Array3<T>, GroupStats<T>) {
    let (n, c, l) = x.dim();
    let cpg = c / groups;
    let count = T::of((cpg * l) as f64);
    let eps = T::of(GROUP_NORM_EPS);
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("standard layout");
    let mut y = vec![T::zero(); n * c * l];
    let mut mean = Array2::<T>::zeros((n, groups));
    let mut rstd = Array2::<T>::zeros((n, groups));
    let block = cpg * l;
    for (k, (xb, yb)) in src.chunks_exact(block).zip(y.chunks_exact_mut(block)).enumerate() {
        let (i, g) = (k / groups, k % groups);
        let mu = xb.iter().copied().sum::<T>() / count;
        let var = xb.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / count;
        let r = T::one() / (var + eps).sqrt();
        mean[[i, g]] = mu;
        rstd[[i, g]] = r;
        for (j, (xr, yr)) in xb.chunks_exact(l).zip(yb.chunks_exact_mut(l)).enumerate() {
            let ch = g * cpg + j;
            let (ga, be) = (gamma[ch], beta[ch]);
            for (o, &v) in yr.iter_mut().zip(xr) {
                *o = (v - mu) * r * ga + be;
            }
        }
    }
    let y = Array3::from_shape_vec((n, c, l), y).expect("group norm output size");
    (y, GroupStats { mean, rstd })
}

pub fn group_norm_backward<T: Scalar>(
    x: ArrayView3<T>,
    gamma: ArrayView1<T>,
    stats: &GroupStats<T>,
    dy: ArrayView3<T>,
    groups: usize,
) -> (Array3<T>, Array1<T>, Array1<T>) {
    let (n, c, l) = x.dim();
    let cpg = c / groups;
    let count = T::of((cpg * l) as f64);
    let xs = x.as_standard_layout();
    let dys = dy.as_standard_layout();
    let (xsl, dysl) = (xs.as_slice().expect("standard layout"), dys.as_slice().expect("standard layout"));
    let mut dx = vec![T::zero(); n * c * l];
    let mut dgamma = Array1::<T>::zeros(c);
    let mut dbeta = Array1::<T>::zeros(c);
    let block = cpg * l;
    for (k, ((xb, db), dxb)) in xsl
        .chunks_exact(block)
        .zip(dysl.chunks_exact(block))
        .zip(dx.chunks_exact_mut(block))
        .enumerate()
    {
        let (i, g) = (k / groups, k % groups);
        let (mu, r) = (stats.mean[[i, g]], stats.rstd[[i, g]]);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for (j, (xr, dr)) in xb.chunks_exact(l).zip(db.chunks_exact(l)).enumerate() {
            let ch = g * cpg + j;
            let (mut dg, mut dbt) = (T::zero(), T::zero());
            for (&xv, &d) in xr.iter().zip(dr) {
                let xhat = (xv - mu) * r;
                dg += d * xhat;
                dbt += d;
                let dxhat = d * gamma[ch];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            dgamma[ch] += dg;
            dbeta[ch] += dbt;
        }
        let (a, b) = (sum_dxhat / count, sum_dxhat_xhat / count);
        for (j, ((xr, dr), out)) in xb.chunks_exact(l).zip(db.chunks_exact(l)).zip(dxb.chunks_exact_mut(l)).enumerate() {
            let ga = gamma[g * cpg + j];
            for ((&xv, &d), o) in xr.iter().zip(dr).zip(out.iter_mut()) {
                let xhat = (xv - mu) * r;
                *o = r * (d * ga - a - xhat * b);
            }
        }
    }
    let dx = Array3::from_shape_vec((n, c, l), dx).expect("group norm gradient size");
    (dx, dgamma, dbeta)
}

pub fn upsample_nearest2x<T: Scalar>(x: ArrayView4<T>) -> Array4<T> {
    let (n, c, h, w) = x.dim();
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(n * c * h * w * 4);
    for row in src.chunks_exact(w) {
        for _ in 0..2 {
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Array4::from_shape_vec((n, c, 2 * h, 2 * w), out).expect("upsample output size")
}

pub fn upsample_nearest2x_backward<T: Scalar>(dy: ArrayView4<T>) -> Array4<T> {
    let (n, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let ds = dy.as_standard_layout();
    let src = ds.as_slice().expect("standard layout");
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, out) in src.chunks_exact(h2 * w2).zip(dx.chunks_exact_mut(h * w)) {
        for (y2, row) in plane.chunks_exact(w2).enumerate() {
            let orow = &mut out[(y2 / 2) * w..][..w];
            for (x2, &v) in row.iter().enumerate() {
                orow[x2 / 2] += v;
            }
        }
    }
    Array4::from_shape_vec((n, c, h, w), dx).expect("upsample gradient size")
}

/// Takes ownership without copying when `a` is already in standard layout.
pub fn standard<T: Clone, D: ndarray::Dimension>(a: ndarray::Array<T, D>) -> ndarray::Array<T, D> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}
