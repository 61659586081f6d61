//! Image-to-video weight inflation.
//!
//! The video model is the image model applied to folded frames, so every
//! image parameter carries over under its own name. The only new entries are
//! the temporal adapters under `adapter.`, whose zero output projection keeps
//! the inflated model exactly equal to the per-frame image model.

use std::collections::BTreeSet;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::adapter::is_adapter_param;
use crate::batch::{ImageBatch, TextTokens, VideoBatch};
use crate::error::{Error, Result};
use crate::model::{forward_image, forward_video, image_param_specs, init_adapters, ModelConfig};
use crate::scalar::Scalar;
use crate::store::ParameterStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InflationReport {
    pub mapped_names: usize,
    pub injected_adapter_names: usize,
    pub max_abs_discrepancy: f64,
    pub source_fingerprint: String,
    pub target_fingerprint: String,
}

/// Copies `image_params` verbatim and appends freshly initialized adapters.
pub fn inflate<T: Scalar>(image_params: &ParameterStore<T>, config: &ModelConfig, adapter_seed: u64) -> Result<ParameterStore<T>> {
    config.validate()?;
    let specs = image_param_specs(config);
    let expected: BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
    let mut offending = Vec::new();
    for spec in &specs {
        match image_params.get(&spec.name) {
            None => offending.push(format!("{} (missing)", spec.name)),
            Some(v) if v.shape() != spec.shape.as_slice() => {
                offending.push(format!("{} (shape {:?}, expected {:?})", spec.name, v.shape(), spec.shape))
            }
            Some(_) => {}
        }
    }
    for name in image_params.names().filter(|n| !expected.contains(n)) {
        offending.push(format!("{name} (not part of the image model)"));
    }
    if !offending.is_empty() {
        return Err(Error::Inflation {
            message: "source parameters do not match the configuration".into(),
            names: offending,
        });
    }
    let mut video = image_params.clone();
    video.fingerprint = config.fingerprint();
    for (name, v) in init_adapters(config, adapter_seed) {
        video.insert(name, v)?;
    }
    Ok(video)
}

/// Drops adapter entries, restoring the image-model fingerprint.
pub fn strip_adapters<T: Scalar>(video_params: &ParameterStore<T>, config: &ModelConfig) -> ParameterStore<T> {
    let mut image = video_params.filtered(|n| !is_adapter_param(n));
    image.fingerprint = config.image_fingerprint();
    image
}

/// Element count over entries whose name satisfies `filter`.
pub fn count_params<T: Scalar>(params: &ParameterStore<T>, filter: impl Fn(&str) -> bool) -> usize {
    params.count(filter)
}

/// Compares the video model on `probe` against the image model run frame by frame.
///
/// `probe` carries the denoiser input channels; `t` and `text` hold one entry per clip.
pub fn verify_inflation<T: Scalar>(
    image_params: &ParameterStore<T>,
    video_params: &ParameterStore<T>,
    config: &ModelConfig,
    probe: &VideoBatch<T>,
    text: &TextTokens,
    t: &[usize],
    adapters_enabled: bool,
) -> Result<InflationReport> {
    let video_out = forward_video(video_params, config, probe, t, text, adapters_enabled)?;
    let (b, f, _, _, _) = probe.dim();
    let mut max_abs = 0.0f64;
    for clip in 0..b {
        let caption = text.rows(&[clip]);
        for frame in 0..f {
            let x = probe.data.index_axis(Axis(0), clip).index_axis(Axis(0), frame).to_owned();
            let x = ImageBatch::new(x.insert_axis(Axis(0)))?;
            let y = forward_image(image_params, config, &x, &[t[clip]], &caption)?;
            let v = video_out.data.slice(ndarray::s![clip, frame, .., .., ..]);
            for (a, b) in y.data.index_axis(Axis(0), 0).iter().zip(v.iter()) {
                max_abs = max_abs.max((a.as_f64() - b.as_f64()).abs());
            }
        }
    }
    Ok(InflationReport {
        mapped_names: video_params.names().filter(|n| !is_adapter_param(n)).count(),
        injected_adapter_names: video_params.names().filter(|n| is_adapter_param(n)).count(),
        max_abs_discrepancy: max_abs,
        source_fingerprint: image_params.content_hash(),
        target_fingerprint: video_params.content_hash(),
    })
}
