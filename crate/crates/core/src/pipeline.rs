//! End-to-end helpers shared by the command line and the experiments.

use crate::batch::{TextTokens, VideoBatch};
use crate::data::{Corpus, Dataset};
use crate::diffusion::{sample, NoiseSchedule};
use crate::error::Result;
use crate::model::{build_image_unet, Binder, ModelConfig, UNet};
use crate::rng;
use crate::scalar::Scalar;
use crate::store::ParameterStore;
use crate::tuning::{has_adapters, train_with_progress, Progress, TrainLog, TrainRunConfig, TuningMode};

/// Trains a freshly initialized image model on single frames of `dataset`.
pub fn pretrain_image<T: Scalar, D: Dataset + ?Sized>(
    config: &ModelConfig,
    schedule: &NoiseSchedule,
    dataset: &D,
    run: &TrainRunConfig,
    init_seed: u64,
    progress: Progress<'_>,
) -> Result<(ParameterStore<T>, TrainLog)> {
    let init = build_image_unet::<T>(config, init_seed)?;
    let run = TrainRunConfig {
        mode: TuningMode::Full,
        ..run.clone()
    };
    train_with_progress(&init, config, schedule, dataset, &run, progress)
}

/// Samples one clip; the seed is derived from `seed` and `id`, so results do not
/// depend on which other clips are sampled alongside.
pub fn sample_clip<T: Scalar>(
    params: &ParameterStore<T>,
    config: &ModelConfig,
    schedule: &NoiseSchedule,
    lr: &VideoBatch<T>,
    caption: &[u32],
    id: &str,
    seed: u64,
) -> Result<VideoBatch<T>> {
    let adapters = has_adapters(params, config)?;
    let unet = UNet::new(config, Binder::frozen(params), adapters);
    let ids = ndarray::Array2::from_shape_vec((1, caption.len()), caption.to_vec()).expect("one caption row");
    let text = TextTokens::new(ids, config.vocab_size)?;
    sample(&unet, schedule, lr, &text, rng::derived_seed(seed, id))
}

/// Super-resolves the given corpus clips, returning `(id, clip)` pairs in order.
pub fn sample_corpus_clips<T: Scalar>(
    params: &ParameterStore<T>,
    config: &ModelConfig,
    schedule: &NoiseSchedule,
    corpus: &Corpus,
    indices: &[usize],
    seed: u64,
) -> Result<Vec<(String, VideoBatch<f32>)>> {
    indices
        .iter()
        .map(|&i| {
            let clip = &corpus.clips[i];
            let out = sample_clip(params, config, schedule, &clip.lr.cast::<T>(), &clip.caption, &clip.id, seed)?;
            Ok((clip.id.clone(), out.cast::<f32>()))
        })
        .collect()
}
