//! PSNR, SSIM and temporal change consistency.
//!
//! All accumulation happens in `f64` regardless of the input element type.

use std::fmt::Write as _;

use ndarray::{s, Array2, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{ImageBatch, VideoBatch};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("metric inputs differ in shape: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// `10·log10(max² / MSE)` over the whole batch; `f64::INFINITY` when the inputs are equal.
pub fn psnr<T: Scalar>(a: &ImageBatch<T>, b: &ImageBatch<T>, max_val: f64) -> Result<f64> {
    same_shape(a.data.shape(), b.data.shape())?;
    if !(max_val > 0.0) {
        return Err(Error::Metric(format!("max_val must be positive, got {max_val}")));
    }
    let n = a.data.len();
    let sse: f64 = a.data.iter().zip(b.data.iter()).map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    let mse = sse / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        *t = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Valid-mode separable Gaussian filtering of one plane.
fn filter(plane: &Array2<f64>, taps: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let rows: Array2<f64> = Array2::from_shape_fn((h, ow), |(y, x)| (0..SSIM_WINDOW).map(|k| taps[k] * plane[[y, x + k]]).sum());
    Array2::from_shape_fn((oh, ow), |(y, x)| (0..SSIM_WINDOW).map(|k| taps[k] * rows[[y + k, x]]).sum())
}

/// Mean SSIM over valid windows of every channel of a `(C, H, W)` pair.
fn ssim_planes(a: ArrayView3<f64>, b: ArrayView3<f64>, max_val: f64) -> f64 {
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * max_val).powi(2);
    let c2 = (SSIM_K2 * max_val).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for (pa, pb) in a.outer_iter().zip(b.outer_iter()) {
        let (pa, pb) = (pa.to_owned(), pb.to_owned());
        let mu_a = filter(&pa, &taps);
        let mu_b = filter(&pb, &taps);
        let aa = filter(&(&pa * &pa), &taps);
        let bb = filter(&(&pb * &pb), &taps);
        let ab = filter(&(&pa * &pb), &taps);
        for ((((&ma, &mb), &xx), &yy), &xy) in mu_a.iter().zip(mu_b.iter()).zip(aa.iter()).zip(bb.iter()).zip(ab.iter()) {
            let va = xx - ma * ma;
            let vb = yy - mb * mb;
            let cov = xy - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

fn check_window(h: usize, w: usize) -> Result<()> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Metric(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    Ok(())
}

/// Gaussian-window SSIM averaged over windows, channels and images.
pub fn ssim<T: Scalar>(a: &ImageBatch<T>, b: &ImageBatch<T>, max_val: f64) -> Result<f64> {
    same_shape(a.data.shape(), b.data.shape())?;
    let (n, _, h, w) = a.dim();
    check_window(h, w)?;
    let a = a.data.mapv(|v| v.as_f64());
    let b = b.data.mapv(|v| v.as_f64());
    let sum: f64 = (0..n)
        .map(|i| ssim_planes(a.index_axis(Axis(0), i), b.index_axis(Axis(0), i), max_val))
        .sum();
    Ok(sum / n as f64)
}

/// Mean over consecutive frame pairs of SSIM between absolute difference maps, averaged over clips.
pub fn tcc<T: Scalar>(h: &VideoBatch<T>, g: &VideoBatch<T>, max_val: f64) -> Result<f64> {
    same_shape(h.data.shape(), g.data.shape())?;
    let (b, f, _, hh, ww) = h.dim();
    if f < 2 {
        return Err(Error::Metric(format!("temporal consistency needs at least 2 frames, got {f}")));
    }
    check_window(hh, ww)?;
    let h = h.data.mapv(|v| v.as_f64());
    let g = g.data.mapv(|v| v.as_f64());
    let mut total = 0.0;
    for clip in 0..b {
        let mut acc = 0.0;
        for i in 0..f - 1 {
            let dh = (&h.slice(s![clip, i, .., .., ..]) - &h.slice(s![clip, i + 1, .., .., ..])).mapv(f64::abs);
            let dg = (&g.slice(s![clip, i, .., .., ..]) - &g.slice(s![clip, i + 1, .., .., ..])).mapv(f64::abs);
            acc += ssim_planes(dh.view(), dg.view(), max_val);
        }
        total += acc / (f - 1) as f64;
    }
    Ok(total / b as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMetrics {
    /// Mean over frames; `None` stands for infinite PSNR.
    pub psnr_db: Option<f64>,
    pub ssim: f64,
    /// `None` for single-frame clips.
    pub tcc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean over clips with finite PSNR; `None` when every clip is infinite.
    pub psnr_db: Option<f64>,
    pub infinite_psnr_clips: usize,
    pub ssim: f64,
    pub tcc: Option<f64>,
    pub per_clip: Vec<ClipMetrics>,
}

fn clip_metrics<T: Scalar>(gen: &VideoBatch<T>, gt: &VideoBatch<T>, max_val: f64) -> Result<ClipMetrics> {
    let f = gen.frames();
    let frame = |v: &VideoBatch<T>, i: usize| ImageBatch {
        data: v.data.slice(s![0, i..i + 1, .., .., ..]).to_owned(),
    };
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for i in 0..f {
        let (a, b) = (frame(gen, i), frame(gt, i));
        psnr_sum += psnr(&a, &b, max_val)?;
        ssim_sum += ssim(&a, &b, max_val)?;
    }
    let psnr_db = psnr_sum / f as f64;
    Ok(ClipMetrics {
        psnr_db: psnr_db.is_finite().then_some(psnr_db),
        ssim: ssim_sum / f as f64,
        tcc: if f >= 2 { Some(tcc(gt, gen, max_val)?) } else { None },
    })
}

fn split_clips<T: Scalar>(set: &[VideoBatch<T>]) -> Vec<VideoBatch<T>> {
    set.iter().flat_map(|v| (0..v.batch()).map(|b| v.clip(b))).collect()
}

/// Per-clip and aggregate metrics of generated clips against ground truth.
pub fn evaluate<T: Scalar>(generated: &[VideoBatch<T>], ground_truth: &[VideoBatch<T>], max_val: f64) -> Result<MetricsReport> {
    let gen = split_clips(generated);
    let gt = split_clips(ground_truth);
    if gen.len() != gt.len() || gen.is_empty() {
        return Err(Error::Data(format!("{} generated clips paired with {} ground-truth clips", gen.len(), gt.len())));
    }
    if let Some(i) = (0..gen.len()).find(|&i| gen[i].dim() != gt[i].dim()) {
        return Err(Error::Data(format!("clip {i}: generated {:?} vs ground truth {:?}", gen[i].dim(), gt[i].dim())));
    }
    let per_clip = gen
        .par_iter()
        .zip(gt.par_iter())
        .map(|(a, b)| clip_metrics(a, b, max_val))
        .collect::<Result<Vec<_>>>()?;
    let finite: Vec<f64> = per_clip.iter().filter_map(|c| c.psnr_db).collect();
    let tccs: Vec<f64> = per_clip.iter().filter_map(|c| c.tcc).collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    Ok(MetricsReport {
        psnr_db: mean(&finite),
        infinite_psnr_clips: per_clip.len() - finite.len(),
        ssim: per_clip.iter().map(|c| c.ssim).sum::<f64>() / per_clip.len() as f64,
        tcc: mean(&tccs),
        per_clip,
    })
}

/// A row of the large-scale reference results.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceRow {
    pub method: &'static str,
    pub psnr_db: f64,
    pub ssim: f64,
    pub tcc: f64,
}

pub const REFERENCE_ROWS: [ReferenceRow; 3] = [
    ReferenceRow {
        method: "ZS",
        psnr_db: 18.1,
        ssim: 0.42,
        tcc: 0.70,
    },
    ReferenceRow {
        method: "Full",
        psnr_db: 28.7,
        ssim: 0.77,
        tcc: 0.86,
    },
    ReferenceRow {
        method: "Temporal",
        psnr_db: 24.3,
        ssim: 0.62,
        tcc: 0.82,
    },
];

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    match v {
        Some(x) => format!("{x:.digits$}"),
        None => "inf".into(),
    }
}

/// Plain-text table of measured rows followed by the reference rows.
pub fn render_table(rows: &[(&str, &MetricsReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<12} {:>10} {:>8} {:>8}", "Method", "PSNR (dB)", "SSIM", "TCC");
    for (name, r) in rows {
        let tcc = r.tcc.map_or("n/a".to_string(), |t| format!("{t:.3}"));
        let _ = writeln!(out, "{:<12} {:>10} {:>8.3} {:>8}", name, fmt_opt(r.psnr_db, 2), r.ssim, tcc);
    }
    let _ = writeln!(out, "reference (large scale)");
    for r in REFERENCE_ROWS {
        let _ = writeln!(out, "{:<12} {:>10.2} {:>8.3} {:>8.3}", r.method, r.psnr_db, r.ssim, r.tcc);
    }
    out
}
