use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array5};
use serde::Serialize;
use vsr_core::data::{generate_corpus, split, ClipSet, Corpus};
use vsr_core::diffusion::{denoiser_input, NoiseSchedule};
use vsr_core::inflation::{inflate, strip_adapters, verify_inflation};
use vsr_core::metrics::{evaluate, render_table, MetricsReport};
use vsr_core::pipeline::{pretrain_image, sample_corpus_clips};
use vsr_core::tuning::{efficiency_report, train_with_progress, TrainLog, TrainRunConfig, TuningMode};
use vsr_core::{rng, Error, ParameterStoreF32, Result, TextTokens, VideoBatch};

use crate::config::RunConfigFile;
use crate::png;

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_vec_pretty(value)?)?;
    Ok(())
}

fn load_checkpoint(path: &Path, expected: &str, what: &str) -> Result<ParameterStoreF32> {
    if !path.exists() {
        return Err(Error::Data(format!("{what} checkpoint {} does not exist", path.display())));
    }
    let store = ParameterStoreF32::load(path)?;
    if store.fingerprint != expected {
        return Err(Error::Format(format!(
            "{what} checkpoint {} was built for configuration {}, expected {expected}",
            path.display(),
            store.fingerprint
        )));
    }
    Ok(store)
}

fn load_corpus(config: &RunConfigFile) -> Result<Corpus> {
    let corpus = Corpus::load(&config.paths.corpus)?;
    let d = &config.data;
    if (corpus.frames, corpus.height, corpus.width) != (d.frames, d.height, d.width) {
        return Err(Error::Data(format!(
            "corpus at {} holds {}x{}x{} clips, configuration expects {}x{}x{}",
            config.paths.corpus.display(),
            corpus.frames,
            corpus.height,
            corpus.width,
            d.frames,
            d.height,
            d.width
        )));
    }
    Ok(corpus)
}

/// Training and held-out clip indices.
fn splits(config: &RunConfigFile, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let f = config.data.eval_fraction;
    let mut parts = split(n, &[1.0 - f, f], config.data.seed)?;
    let held_out = parts.pop().expect("two parts");
    let train = parts.pop().expect("two parts");
    Ok((train, held_out))
}

fn schedule(config: &RunConfigFile) -> Result<NoiseSchedule> {
    config.schedule.build()
}

fn progress_printer(label: &'static str, every: usize, total: usize) -> impl FnMut(&vsr_core::tuning::StepRecord) {
    move |r| {
        if (r.step + 1) % every == 0 || r.step + 1 == total {
            eprintln!("{label} step {}/{total} loss {:.5}", r.step + 1, r.loss);
        }
    }
}

pub fn gen_data(config: &RunConfigFile, out: Option<PathBuf>) -> Result<()> {
    let d = &config.data;
    let dir = out.unwrap_or_else(|| config.paths.corpus.clone());
    let corpus = generate_corpus(d.n_clips, d.frames, d.height, d.width, d.seed)?;
    corpus.save(&dir)?;
    Corpus::load(&dir)?.verify_pairs()?;
    println!("wrote {} clips to {}", corpus.clips.len(), dir.display());
    Ok(())
}

pub fn pretrain(config: &RunConfigFile, out: Option<PathBuf>) -> Result<()> {
    let corpus = load_corpus(config)?;
    let (train, _) = splits(config, corpus.clips.len())?;
    let p = &config.pretrain;
    let run = TrainRunConfig {
        mode: TuningMode::Full,
        steps: p.steps,
        batch_size: p.batch_size,
        learning_rate: p.learning_rate,
        seed: p.seed,
        log_every: p.log_every,
    };
    let frames = corpus.frames_of(train);
    let mut show = progress_printer("pretrain", p.log_every, p.steps);
    let (params, log) = pretrain_image::<f32, _>(&config.model, &schedule(config)?, &frames, &run, p.init_seed, &mut show)?;
    let out = out.unwrap_or_else(|| config.paths.image_checkpoint.clone());
    ensure_parent(&out)?;
    params.save(&out)?;
    let log_path = config.paths.runs.join("pretrain.log.jsonl");
    ensure_parent(&log_path)?;
    log.save(&log_path)?;
    println!("image checkpoint {} ({} parameters), log {}", out.display(), params.count(|_| true), log_path.display());
    Ok(())
}

/// Random denoiser inputs and captions for inflation checks.
fn probe(config: &RunConfigFile, index: usize) -> Result<(VideoBatch<f32>, TextTokens, Vec<usize>)> {
    let m = &config.model;
    let mut r = rng::derived_rng(config.inflate.adapter_seed, &format!("probe-{index}"));
    let shape = [1, m.frames, m.image_channels, m.height, m.width];
    let x_t = VideoBatch::new(rng::normal_array::<f32>(&mut r, &shape).into_dimensionality().expect("rank 5"))?;
    let lr_shape = [1, m.frames, m.image_channels, m.height / 4, m.width / 4];
    let lr = rng::uniform_array::<f32>(&mut r, &lr_shape, 1.0).mapv(|v| 0.5 + 0.5 * v);
    let lr = VideoBatch::new(lr.into_dimensionality::<ndarray::Ix5>().expect("rank 5"))?;
    let input: Array5<f32> = denoiser_input(&x_t, &lr)?;
    let ids = Array2::from_shape_fn((1, m.max_text_len), |_| rand::Rng::random_range(&mut r, 0..m.vocab_size as u32));
    let t = vec![rand::Rng::random_range(&mut r, 0..config.schedule.steps)];
    Ok((VideoBatch::new(input)?, TextTokens::new(ids, m.vocab_size)?, t))
}

#[derive(Serialize)]
struct InflateSummary {
    probes: usize,
    mapped_names: usize,
    injected_adapter_names: usize,
    max_abs_discrepancy: f64,
    source_fingerprint: String,
    target_fingerprint: String,
    stripped_equals_source: bool,
}

pub fn inflate_cmd(config: &RunConfigFile, input: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let input = input.unwrap_or_else(|| config.paths.image_checkpoint.clone());
    let image = load_checkpoint(&input, &config.model.image_fingerprint(), "image")?;
    let video = inflate(&image, &config.model, config.inflate.adapter_seed)?;
    let mut report = None;
    let mut worst = 0.0f64;
    for i in 0..config.inflate.probes.max(1) {
        let (x, text, t) = probe(config, i)?;
        let r = verify_inflation(&image, &video, &config.model, &x, &text, &t, true)?;
        worst = worst.max(r.max_abs_discrepancy);
        report = Some(r);
    }
    let r = report.expect("at least one probe");
    let stripped = strip_adapters(&video, &config.model);
    let summary = InflateSummary {
        probes: config.inflate.probes.max(1),
        mapped_names: r.mapped_names,
        injected_adapter_names: r.injected_adapter_names,
        max_abs_discrepancy: worst,
        source_fingerprint: r.source_fingerprint,
        target_fingerprint: r.target_fingerprint,
        stripped_equals_source: stripped.to_bytes()? == image.to_bytes()?,
    };
    let out = out.unwrap_or_else(|| config.paths.video_checkpoint.clone());
    ensure_parent(&out)?;
    video.save(&out)?;
    write_json(&config.paths.runs.join("inflation.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

pub fn log_path(config: &RunConfigFile, mode: TuningMode) -> PathBuf {
    config.paths.runs.join(format!("finetune-{}.log.jsonl", mode.name()))
}

pub fn finetune(config: &RunConfigFile, input: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let input = input.unwrap_or_else(|| config.paths.video_checkpoint.clone());
    let video = load_checkpoint(&input, &config.model.fingerprint(), "video")?;
    let corpus = load_corpus(config)?;
    let (train, _) = splits(config, corpus.clips.len())?;
    let run = &config.tuning;
    let mut show = progress_printer("finetune", run.log_every, run.steps);
    let (tuned, log) = train_with_progress(&video, &config.model, &schedule(config)?, &corpus.view(train), run, &mut show)?;
    let out = out.unwrap_or_else(|| config.paths.finetuned_checkpoint.clone());
    ensure_parent(&out)?;
    tuned.save(&out)?;
    let path = log_path(config, run.mode);
    ensure_parent(&path)?;
    log.save(&path)?;
    println!(
        "{} checkpoint {} ({} trainable parameters), log {}",
        run.mode.name(),
        out.display(),
        tuned.count(vsr_core::tuning::trainable_filter(run.mode)),
        path.display()
    );
    let (full, temporal) = (log_path(config, TuningMode::Full), log_path(config, TuningMode::Temporal));
    if full.exists() && temporal.exists() {
        let (lf, lt) = (TrainLog::load(&full)?, TrainLog::load(&temporal)?);
        if !lf.is_empty() && !lt.is_empty() {
            let report = efficiency_report(&lf, &lt)?;
            write_json(&config.paths.runs.join("efficiency.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

pub fn sample_cmd(config: &RunConfigFile, input: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>) -> Result<()> {
    let input = input.unwrap_or_else(|| config.paths.finetuned_checkpoint.clone());
    let params = load_checkpoint(&input, &config.model.fingerprint(), "video")?;
    let corpus = load_corpus(config)?;
    let (_, mut held_out) = splits(config, corpus.clips.len())?;
    held_out.truncate(config.sample.max_clips);
    let seed = seed.unwrap_or(config.sample.seed);
    let clips = sample_corpus_clips(&params, &config.model, &schedule(config)?, &corpus, &held_out, seed)?;
    let out = out.unwrap_or_else(|| config.paths.samples.clone());
    let set = ClipSet { clips };
    set.save(&out)?;
    for (id, clip) in &set.clips {
        png::write_frame_grid(&out.join("png").join(format!("{id}.png")), clip)?;
    }
    println!("sampled {} clips into {}", set.clips.len(), out.display());
    Ok(())
}

/// Ground truth as clips, read from either a corpus or a clip set directory.
fn load_ground_truth(dir: &Path) -> Result<ClipSet> {
    if dir.join("manifest.json").exists() {
        let corpus = Corpus::load(dir)?;
        Ok(ClipSet {
            clips: corpus.clips.into_iter().map(|c| (c.id, c.hr)).collect(),
        })
    } else {
        ClipSet::load(dir)
    }
}

pub fn eval_cmd(generated: &Path, ground_truth: &Path, out: Option<PathBuf>, label: &str) -> Result<MetricsReport> {
    let gen = ClipSet::load(generated)?;
    let gt = load_ground_truth(ground_truth)?;
    let mut pairs = Vec::with_capacity(gen.clips.len());
    for (id, clip) in &gen.clips {
        let truth = gt
            .get(id)
            .ok_or_else(|| Error::Data(format!("no ground truth for clip {id} in {}", ground_truth.display())))?;
        pairs.push((clip.clone(), truth.clone()));
    }
    let (g, t): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let report = evaluate(&g, &t, 1.0)?;
    if let Some(out) = out {
        write_json(&out, &report)?;
    }
    print!("{}", render_table(&[(label, &report)]));
    Ok(report)
}

#[derive(Serialize)]
struct ParamCounts {
    total: usize,
    backbone: usize,
    adapter: usize,
    trainable_zero_shot: usize,
    trainable_full: usize,
    trainable_temporal: usize,
    temporal_over_full: f64,
}

pub fn count_params(config: &RunConfigFile, checkpoint: Option<PathBuf>) -> Result<()> {
    let store = match checkpoint {
        Some(p) => ParameterStoreF32::load(&p)?,
        None => vsr_core::model::build_video_unet::<f32>(&config.model, 0, 0)?,
    };
    let count = |m| store.count(vsr_core::tuning::trainable_filter(m));
    let adapter = store.count(vsr_core::adapter::is_adapter_param);
    let total = store.count(|_| true);
    let counts = ParamCounts {
        total,
        backbone: total - adapter,
        adapter,
        trainable_zero_shot: count(TuningMode::ZeroShot),
        trainable_full: count(TuningMode::Full),
        trainable_temporal: count(TuningMode::Temporal),
        temporal_over_full: count(TuningMode::Temporal) as f64 / count(TuningMode::Full) as f64,
    };
    println!("{}", serde_json::to_string_pretty(&counts)?);
    Ok(())
}
