//! DDPM forward/reverse processes with ε-prediction, conditioned on
//! bilinearly upsampled low-resolution frames.
//!
//! Pixel values are in `[0, 1]` at this module's public boundary
//! ([`training_loss`], [`sample`]). Inside, frames are mapped to `[-1, 1]`
//! and the chain ([`q_sample`], [`p_sample_step`]) runs on the residual
//! between the target and the upsampled condition, so a near-identity
//! prediction at high noise lands on the bilinear estimate rather than grey.

use ndarray::{Array5, ArrayD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::batch::{TextTokens, VideoBatch};
use crate::error::{Error, Result};
use crate::model::UNet;
use crate::rng;
use crate::scalar::Scalar;

/// Gain on the model-space residual so the diffused data is near unit scale
/// instead of sitting under the per-step reverse noise.
pub const RESIDUAL_SCALE: f64 = 10.0;

/// Spatial ratio between target and conditioning frames.
pub const SR_FACTOR: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(alias = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Linear β schedule with cumulative products accumulated in `f64`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::config("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0f64, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::Index(format!("timestep {t} outside [0, {})", self.steps())));
        }
        Ok(())
    }
}

/// Anything that predicts the injected noise for clips `(B, F, 2C, H, W)`.
pub trait Denoiser<T: Scalar> {
    /// Records the prediction on `g`; returns a `(B, F, C, H, W)` node.
    fn predict_eps(&self, g: &mut Graph<T>, input: Var, t: &[usize], text: &TextTokens) -> Result<Var>;
}

impl<T: Scalar> Denoiser<T> for UNet<'_, T> {
    fn predict_eps(&self, g: &mut Graph<T>, input: Var, t: &[usize], text: &TextTokens) -> Result<Var> {
        self.forward_clips(g, input, t, text)
    }
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · ε`, with `t` per clip and `x0` in `[-1, 1]`.
pub fn q_sample<T: Scalar>(schedule: &NoiseSchedule, x0: &VideoBatch<T>, t: &[usize], eps: &VideoBatch<T>) -> Result<VideoBatch<T>> {
    if x0.dim() != eps.dim() {
        return Err(Error::shape(format!("x0 {:?} vs eps {:?}", x0.dim(), eps.dim())));
    }
    if t.len() != x0.batch() {
        return Err(Error::shape(format!("{} clips but {} timesteps", x0.batch(), t.len())));
    }
    let mut out = x0.data.clone();
    for (b, &tb) in t.iter().enumerate() {
        schedule.check(tb)?;
        let ab = schedule.alpha_bar[tb];
        let (sa, sn) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
        out.index_axis_mut(Axis(0), b)
            .zip_mut_with(&eps.data.index_axis(Axis(0), b), |x, &e| *x = sa * *x + sn * e);
    }
    Ok(VideoBatch { data: out })
}

/// Bilinear resize by an integer factor (half-pixel centers, clamped edges).
pub fn upsample_bilinear<T: Scalar>(v: &VideoBatch<T>, factor: usize) -> VideoBatch<T> {
    let (b, f, c, h, w) = v.dim();
    let (ho, wo) = (h * factor, w * factor);
    let coords = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = coords(ho, h);
    let xs = coords(wo, w);
    let data = Array5::from_shape_fn((b, f, c, ho, wo), |(bi, fi, ci, y, x)| {
        let (y0, y1, wy) = ys[y];
        let (x0, x1, wx) = xs[x];
        let p = |yy: usize, xx: usize| v.data[[bi, fi, ci, yy, xx]].as_f64();
        let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
        let bottom = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
        T::of(top * (1.0 - wy) + bottom * wy)
    });
    VideoBatch { data }
}

fn to_model_space<T: Scalar>(v: &Array5<T>) -> Array5<T> {
    let two = T::of(2.0);
    v.mapv(|x| x * two - T::one())
}

/// Upsampled condition in model space, checked against the target shape.
fn upsampled_condition<T: Scalar>(
    lr_clip: &VideoBatch<T>,
    target: (usize, usize, usize, usize, usize),
) -> Result<Array5<T>> {
    let (b, f, c, h, w) = target;
    let (lb, lf, lc, lh, lw) = lr_clip.dim();
    if (lb, lf, lc) != (b, f, c) || lh * SR_FACTOR != h || lw * SR_FACTOR != w {
        return Err(Error::shape(format!(
            "low-resolution clip {:?} is not a {SR_FACTOR}x reduction of {:?}",
            lr_clip.dim(),
            target
        )));
    }
    Ok(to_model_space(&upsample_bilinear(lr_clip, SR_FACTOR).data))
}

/// Denoiser input: noisy target and upsampled condition stacked on the channel axis.
pub fn denoiser_input<T: Scalar>(x_t: &VideoBatch<T>, lr_clip: &VideoBatch<T>) -> Result<Array5<T>> {
    let cond = upsampled_condition(lr_clip, x_t.dim())?;
    let joined = ndarray::concatenate(Axis(2), &[x_t.data.view(), cond.view()]).map_err(|e| Error::shape(e.to_string()))?;
    Ok(crate::kernels::standard(joined))
}

/// Timesteps and noise drawn for one training example batch.
pub struct NoiseDraw<T> {
    pub t: Vec<usize>,
    pub eps: VideoBatch<T>,
}

pub fn draw_training_noise<T: Scalar>(schedule: &NoiseSchedule, shape: (usize, usize, usize, usize, usize), seed: u64) -> NoiseDraw<T> {
    let mut r = rng::derived_rng(seed, "training-noise");
    let t = (0..shape.0).map(|_| r.random_range(0..schedule.steps())).collect();
    let eps = rng::normal_array::<T>(&mut r, &[shape.0, shape.1, shape.2, shape.3, shape.4])
        .into_dimensionality()
        .expect("rank 5");
    NoiseDraw {
        t,
        eps: VideoBatch { data: eps },
    }
}

/// Graph of the noise-prediction loss, ready for backpropagation.
pub struct LossGraph<T> {
    pub graph: Graph<T>,
    pub loss: Var,
}

pub fn loss_graph<T: Scalar, D: Denoiser<T> + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    hr_clip: &VideoBatch<T>,
    lr_clip: &VideoBatch<T>,
    text: &TextTokens,
    rng_seed: u64,
) -> Result<LossGraph<T>> {
    let draw = draw_training_noise::<T>(schedule, hr_clip.dim(), rng_seed);
    let x0 = VideoBatch {
        data: (to_model_space(&hr_clip.data) - &upsampled_condition(lr_clip, hr_clip.dim())?) * T::of(RESIDUAL_SCALE),
    };
    let x_t = q_sample(schedule, &x0, &draw.t, &draw.eps)?;
    let input = denoiser_input(&x_t, lr_clip)?;
    let mut graph = Graph::new();
    let input = graph.constant(input.into_dyn());
    let pred = denoiser.predict_eps(&mut graph, input, &draw.t, text)?;
    let loss = graph.mse(pred, draw.eps.data.into_dyn())?;
    Ok(LossGraph { graph, loss })
}

/// Mean squared error of the noise prediction; `t` and ε are drawn from `rng_seed`.
pub fn training_loss<T: Scalar, D: Denoiser<T> + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    hr_clip: &VideoBatch<T>,
    lr_clip: &VideoBatch<T>,
    text: &TextTokens,
    rng_seed: u64,
) -> Result<T> {
    let lg = loss_graph(denoiser, schedule, hr_clip, lr_clip, text, rng_seed)?;
    Ok(lg.graph.scalar(lg.loss))
}

pub fn predict_eps<T: Scalar, D: Denoiser<T> + ?Sized>(
    denoiser: &D,
    x_t: &VideoBatch<T>,
    t: usize,
    lr_clip: &VideoBatch<T>,
    text: &TextTokens,
) -> Result<ArrayD<T>> {
    let input = denoiser_input(x_t, lr_clip)?;
    let mut g = Graph::new();
    let input = g.constant(input.into_dyn());
    let ts = vec![t; x_t.batch()];
    let out = denoiser.predict_eps(&mut g, input, &ts, text)?;
    let pred = g.value(out).clone();
    if pred.shape() != x_t.data.shape() {
        return Err(Error::shape(format!("denoiser returned {:?} for {:?}", pred.shape(), x_t.data.shape())));
    }
    Ok(pred)
}

/// One ancestral step `x_t → x_{t−1}` with `σ_t² = β_t`; no noise at `t = 0`.
pub fn p_sample_step<T: Scalar, D: Denoiser<T> + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    x_t: &VideoBatch<T>,
    t: usize,
    lr_clip: &VideoBatch<T>,
    text: &TextTokens,
    rng_seed: u64,
) -> Result<VideoBatch<T>> {
    schedule.check(t)?;
    let eps = predict_eps(denoiser, x_t, t, lr_clip, text)?;
    let (alpha, beta, ab) = (schedule.alpha[t], schedule.beta[t], schedule.alpha_bar[t]);
    let inv_sqrt_alpha = T::of(1.0 / alpha.sqrt());
    let eps_coef = T::of(beta / (1.0 - ab).sqrt());
    let mut out = x_t.data.clone();
    out.zip_mut_with(&eps, |x, &e| *x = inv_sqrt_alpha * (*x - eps_coef * e));
    if t > 0 {
        let mut r = rng::derived_rng(rng_seed, "reverse-step");
        let sigma = T::of(beta.sqrt());
        let z = rng::normal_array::<T>(&mut r, out.shape());
        out.zip_mut_with(&z, |x, &n| *x += sigma * n);
    }
    Ok(VideoBatch { data: out })
}

/// Full reverse chain from `x_T ~ N(0, I)`; returns frames in `[0, 1]`.
pub fn sample<T: Scalar, D: Denoiser<T> + ?Sized>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    lr_clip: &VideoBatch<T>,
    text: &TextTokens,
    rng_seed: u64,
) -> Result<VideoBatch<T>> {
    let (b, f, c, h, w) = lr_clip.dim();
    let shape = [b, f, c, h * SR_FACTOR, w * SR_FACTOR];
    let mut r = rng::derived_rng(rng_seed, "sample-init");
    let mut x = VideoBatch {
        data: rng::normal_array::<T>(&mut r, &shape).into_dimensionality().expect("rank 5"),
    };
    for t in (0..schedule.steps()).rev() {
        x = p_sample_step(
            denoiser,
            schedule,
            &x,
            t,
            lr_clip,
            text,
            rng::derived_seed(rng_seed, &format!("step-{t}")),
        )?;
    }
    let base = upsampled_condition(lr_clip, x.dim())?;
    let (half, gain) = (T::of(0.5), T::of(1.0 / RESIDUAL_SCALE));
    Ok(VideoBatch {
        data: ndarray::Zip::from(&x.data)
            .and(&base)
            .map_collect(|&r, &u| ((r * gain + u + T::one()) * half).max(T::zero()).min(T::one())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.01, 0.02).unwrap();
        assert_eq!(s.alpha_bar, vec![0.99]);
    }

    #[test]
    fn alpha_bar_is_cumulative_product() {
        let s = make_schedule(100, 1e-4, 0.02).unwrap();
        for t in 0..100 {
            let prod: f64 = s.alpha[..=t].iter().product();
            assert!((s.alpha_bar[t] - prod).abs() < 1e-12);
            assert!((s.alpha_bar[t].sqrt().powi(2) + (1.0 - s.alpha_bar[t]).sqrt().powi(2) - 1.0).abs() < 1e-6);
        }
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(s.alpha_bar[0], 1.0 - s.beta[0]);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(make_schedule(0, 1e-4, 0.02).is_err());
        assert!(make_schedule(10, 0.0, 0.02).is_err());
        assert!(make_schedule(10, 0.03, 0.02).is_err());
        assert!(make_schedule(10, 1e-4, 1.0).is_err());
    }

    #[test]
    fn bilinear_upsample_preserves_constants_and_interpolates() {
        let v = VideoBatch::new(Array5::from_elem((1, 1, 1, 2, 2), 0.25f64)).unwrap();
        let up = upsample_bilinear(&v, 4);
        assert_eq!(up.dim(), (1, 1, 1, 8, 8));
        assert!(up.data.iter().all(|&x| (x - 0.25).abs() < 1e-15));

        let ramp = VideoBatch::new(Array5::from_shape_fn((1, 1, 1, 1, 2), |(.., x)| x as f64)).unwrap();
        let up = upsample_bilinear(&ramp, 4);
        // output x=3 samples source position (3.5/4 - 0.5) = 0.375
        assert!((up.data[[0, 0, 0, 0, 3]] - 0.375).abs() < 1e-15);
        assert_eq!(up.data[[0, 0, 0, 0, 0]], 0.0);
        assert_eq!(up.data[[0, 0, 0, 0, 7]], 1.0);
    }

    #[test]
    fn q_sample_rejects_out_of_range_timestep() {
        let s = make_schedule(10, 1e-4, 0.02).unwrap();
        let x = VideoBatch::new(Array5::zeros((1, 1, 1, 1, 1))).unwrap();
        assert!(matches!(q_sample::<f64>(&s, &x, &[10], &x), Err(Error::Index(_))));
    }
}
