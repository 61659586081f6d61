//! Zero-shot, full and temporal-adapter tuning with efficiency accounting.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::Instant;

use ndarray::ArrayD;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::is_adapter_param;
use crate::data::{collate, Dataset};
use crate::diffusion::{loss_graph, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::{adapter_param_specs, Binder, ModelConfig, UNet};
use crate::rng;
use crate::scalar::Scalar;
use crate::store::ParameterStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningMode {
    ZeroShot,
    Full,
    Temporal,
}

impl TuningMode {
    pub const ALL: [TuningMode; 3] = [TuningMode::ZeroShot, TuningMode::Full, TuningMode::Temporal];

    pub fn name(self) -> &'static str {
        match self {
            TuningMode::ZeroShot => "zero_shot",
            TuningMode::Full => "full",
            TuningMode::Temporal => "temporal",
        }
    }

    pub fn parse(s: &str) -> Result<TuningMode> {
        TuningMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::config(format!("unknown tuning mode `{s}` (expected zero_shot, full or temporal)")))
    }
}

fn nothing(_: &str) -> bool {
    false
}

fn everything(_: &str) -> bool {
    true
}

/// Which parameter names a mode may update.
pub fn trainable_filter(mode: TuningMode) -> fn(&str) -> bool {
    match mode {
        TuningMode::ZeroShot => nothing,
        TuningMode::Full => everything,
        TuningMode::Temporal => is_adapter_param,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub mode: TuningMode,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        TrainRunConfig {
            mode: TuningMode::Temporal,
            steps: 200,
            batch_size: 4,
            learning_rate: 1e-4,
            seed: 0,
            log_every: 10,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == TuningMode::ZeroShot && self.steps != 0 {
            return Err(Error::config(format!("zero_shot mode trains nothing; steps must be 0, got {}", self.steps)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// Seconds spent on this step.
    pub wall_time: f64,
    pub trainable_param_count: usize,
    /// Parameter, optimizer-state and retained-activation bytes.
    pub peak_memory_estimate: usize,
    pub optimizer_state_bytes: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn steps_per_second(&self) -> f64 {
        let total: f64 = self.records.iter().map(|r| r.wall_time).sum();
        self.records.len() as f64 / total
    }

    pub fn peak_memory(&self) -> usize {
        self.records.iter().map(|r| r.peak_memory_estimate).max().unwrap_or(0)
    }

    pub fn optimizer_state_bytes(&self) -> usize {
        self.records.iter().map(|r| r.optimizer_state_bytes).max().unwrap_or(0)
    }

    pub fn trainable_param_count(&self) -> usize {
        self.records.first().map_or(0, |r| r.trainable_param_count)
    }

    /// Exponential moving average of the loss, one value per record.
    pub fn smoothed_losses(&self, decay: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.records.len());
        let mut acc = None;
        for r in &self.records {
            let v = match acc {
                None => r.loss,
                Some(a) => decay * a + (1.0 - decay) * r.loss,
            };
            acc = Some(v);
            out.push(v);
        }
        out
    }

    /// Mean loss over the first and last `window` records.
    pub fn loss_drop(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.records.len();
        if n < 2 * window || window == 0 {
            return None;
        }
        let mean = |rs: &[StepRecord]| rs.iter().map(|r| r.loss).sum::<f64>() / rs.len() as f64;
        Some((mean(&self.records[..window]), mean(&self.records[n - window..])))
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::File::create(path)?.write_all(self.to_jsonl()?.as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<TrainLog> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut records = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("train log: {e}")))?);
            }
        }
        Ok(TrainLog { records })
    }
}

/// Adam with bias correction; moments exist only for the entries it updates.
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    moments: BTreeMap<String, (ArrayD<T>, ArrayD<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Allocates zeroed moments for every trainable entry.
    pub fn init_state(&mut self, params: &ParameterStore<T>, trainable: impl Fn(&str) -> bool) {
        for (name, v) in params.iter().filter(|(n, _)| trainable(n)) {
            self.moments
                .entry(name.to_string())
                .or_insert_with(|| (ArrayD::zeros(v.raw_dim()), ArrayD::zeros(v.raw_dim())));
        }
    }

    pub fn state_bytes(&self) -> usize {
        self.moments.values().map(|(m, v)| (m.len() + v.len()) * std::mem::size_of::<T>()).sum()
    }

    pub fn state_names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    pub fn step(&mut self, params: &mut ParameterStore<T>, grads: &BTreeMap<String, ArrayD<T>>) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let lr = T::of(self.learning_rate / c1);
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(self.eps);
        for (name, g) in grads {
            let (m, v) = self
                .moments
                .get_mut(name)
                .ok_or_else(|| Error::Parameter(format!("`{name}` has no optimizer state")))?;
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Parameter(format!("`{name}` is not in the store")))?;
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p -= lr * *m / ((*v * inv_c2).sqrt() + eps);
            });
        }
        Ok(())
    }
}

/// Whether `params` carries the full adapter set; a partial set is an error.
pub fn has_adapters<T: Scalar>(params: &ParameterStore<T>, config: &ModelConfig) -> Result<bool> {
    let specs = adapter_param_specs(config);
    let present = specs.iter().filter(|s| params.contains(&s.name)).count();
    match present {
        0 => Ok(false),
        n if n == specs.len() => Ok(true),
        _ => Err(Error::Parameter(format!("only {present} of {} adapter parameters present", specs.len()))),
    }
}

/// Progress callback, invoked after every step with its record.
pub type Progress<'a> = &'a mut dyn FnMut(&StepRecord);

pub fn train<T: Scalar, D: Dataset + ?Sized>(
    params: &ParameterStore<T>,
    config: &ModelConfig,
    schedule: &NoiseSchedule,
    dataset: &D,
    run: &TrainRunConfig,
) -> Result<(ParameterStore<T>, TrainLog)> {
    train_with_progress(params, config, schedule, dataset, run, &mut |_| {})
}

/// Runs `run.steps` Adam steps on the ε-prediction loss, updating only trainable entries.
pub fn train_with_progress<T: Scalar, D: Dataset + ?Sized>(
    params: &ParameterStore<T>,
    config: &ModelConfig,
    schedule: &NoiseSchedule,
    dataset: &D,
    run: &TrainRunConfig,
    progress: Progress<'_>,
) -> Result<(ParameterStore<T>, TrainLog)> {
    run.validate()?;
    let mut out = params.clone();
    let mut log = TrainLog::default();
    if run.steps == 0 {
        return Ok((out, log));
    }
    if dataset.is_empty() {
        return Err(Error::Data(format!("cannot train {} steps on an empty dataset", run.steps)));
    }
    let adapters = has_adapters(params, config)?;
    let filter = trainable_filter(run.mode);
    let trainable_count = out.count(filter);
    let param_bytes: usize = out.iter().map(|(_, v)| v.len()).sum::<usize>() * std::mem::size_of::<T>();
    let mut adam = Adam::new(run.learning_rate);
    adam.init_state(&out, filter);
    let opt_bytes = adam.state_bytes();

    for step in 0..run.steps {
        let start = Instant::now();
        let batch = batch_indices(dataset.len(), run.batch_size, run.seed, step);
        let (hr, lr, text) = collate::<T, D>(dataset, &batch)?;
        let (loss, grads, activation_bytes) = {
            let unet = UNet::new(config, Binder::new(&out, &filter), adapters);
            let seed = rng::derived_seed(run.seed, &format!("noise-{step}"));
            let lg = loss_graph(&unet, schedule, &hr, &lr, &text, seed)?;
            let loss = lg.graph.scalar(lg.loss).as_f64();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss became non-finite at step {step}")));
            }
            let grads = lg.graph.backward(lg.loss).named(&lg.graph);
            (loss, grads, lg.graph.retained_bytes())
        };
        adam.step(&mut out, &grads)?;
        let record = StepRecord {
            step,
            loss,
            wall_time: start.elapsed().as_secs_f64(),
            trainable_param_count: trainable_count,
            peak_memory_estimate: param_bytes + opt_bytes + activation_bytes,
            optimizer_state_bytes: opt_bytes,
        };
        progress(&record);
        log.records.push(record);
    }
    Ok((out, log))
}

fn batch_indices(len: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut r = rng::derived_rng(seed, &format!("batch-{step}"));
    if batch_size <= len {
        index::sample(&mut r, len, batch_size).into_vec()
    } else {
        (0..batch_size).map(|_| r.random_range(0..len)).collect()
    }
}

/// Temporal-over-full comparison of two training runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub full_trainable_params: usize,
    pub temporal_trainable_params: usize,
    /// temporal / full trainable parameters.
    pub param_ratio: f64,
    pub full_steps_per_second: f64,
    pub temporal_steps_per_second: f64,
    /// temporal / full steps per second.
    pub speed_ratio: f64,
    pub full_peak_memory: usize,
    pub temporal_peak_memory: usize,
    /// temporal / full peak memory estimate.
    pub memory_ratio: f64,
    pub full_optimizer_bytes: usize,
    pub temporal_optimizer_bytes: usize,
    pub optimizer_ratio: f64,
    pub reference: ReferenceRatios,
}

/// Ratios from the large-scale reference runs (params in millions, steps/s, memory in GB).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRatios {
    pub param_ratio: f64,
    pub speed_ratio: f64,
    pub memory_ratio: f64,
}

pub const REFERENCE_RATIOS: ReferenceRatios = ReferenceRatios {
    param_ratio: 67.24 / 628.89,
    speed_ratio: 2.02 / 1.05,
    memory_ratio: 8.0 / 15.0,
};

pub fn efficiency_report(log_full: &TrainLog, log_temporal: &TrainLog) -> Result<EfficiencyReport> {
    if log_full.is_empty() || log_temporal.is_empty() {
        return Err(Error::Data("efficiency comparison needs two non-empty logs".into()));
    }
    let ratio = |a: f64, b: f64| a / b;
    let (fp, tp) = (log_full.trainable_param_count(), log_temporal.trainable_param_count());
    let (fs, ts) = (log_full.steps_per_second(), log_temporal.steps_per_second());
    let (fm, tm) = (log_full.peak_memory(), log_temporal.peak_memory());
    let (fo, to) = (log_full.optimizer_state_bytes(), log_temporal.optimizer_state_bytes());
    Ok(EfficiencyReport {
        full_trainable_params: fp,
        temporal_trainable_params: tp,
        param_ratio: ratio(tp as f64, fp as f64),
        full_steps_per_second: fs,
        temporal_steps_per_second: ts,
        speed_ratio: ratio(ts, fs),
        full_peak_memory: fm,
        temporal_peak_memory: tm,
        memory_ratio: ratio(tm as f64, fm as f64),
        full_optimizer_bytes: fo,
        temporal_optimizer_bytes: to,
        optimizer_ratio: ratio(to as f64, fo as f64),
        reference: REFERENCE_RATIOS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: usize, loss: f64) -> StepRecord {
        StepRecord {
            step,
            loss,
            wall_time: 0.5,
            trainable_param_count: 10,
            peak_memory_estimate: 100,
            optimizer_state_bytes: 80,
        }
    }

    #[test]
    fn filters_by_mode() {
        assert!(!trainable_filter(TuningMode::ZeroShot)("adapter.up.8x.w_q"));
        assert!(trainable_filter(TuningMode::Full)("conv_in.weight"));
        assert!(trainable_filter(TuningMode::Temporal)("adapter.up.8x.w_q"));
        assert!(!trainable_filter(TuningMode::Temporal)("conv_in.weight"));
    }

    #[test]
    fn zero_shot_with_steps_is_rejected() {
        let run = TrainRunConfig {
            mode: TuningMode::ZeroShot,
            steps: 1,
            ..TrainRunConfig::default()
        };
        assert!(matches!(run.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn mode_names_round_trip() {
        for m in TuningMode::ALL {
            assert_eq!(TuningMode::parse(m.name()).unwrap(), m);
            assert_eq!(serde_json::to_value(m).unwrap(), m.name());
        }
        assert!(TuningMode::parse("partial").is_err());
    }

    #[test]
    fn identical_logs_give_unit_ratios() {
        let log = TrainLog {
            records: (0..4).map(|i| record(i, 1.0)).collect(),
        };
        let r = efficiency_report(&log, &log).unwrap();
        assert_eq!((r.param_ratio, r.speed_ratio, r.memory_ratio, r.optimizer_ratio), (1.0, 1.0, 1.0, 1.0));
        assert!((r.reference.param_ratio - 0.107).abs() < 1e-3);
        assert!((r.reference.speed_ratio - 1.92).abs() < 1e-2);
        assert!((r.reference.memory_ratio - 0.533).abs() < 1e-3);
    }

    #[test]
    fn log_jsonl_round_trip() {
        let log = TrainLog {
            records: (0..3).map(|i| record(i, 0.25 * i as f64)).collect(),
        };
        let text = log.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), 3);
        let dir = tempfile::tempdir().unwrap();
        log.save(dir.path().join("log.jsonl")).unwrap();
        assert_eq!(TrainLog::load(dir.path().join("log.jsonl")).unwrap(), log);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // with bias correction the first update is lr·g/(|g|+eps) ≈ lr·sign(g)
        let mut store = ParameterStore::<f64>::new("t");
        store.insert("w", ndarray::arr1(&[1.0, -2.0]).into_dyn()).unwrap();
        let mut adam = Adam::new(0.1);
        adam.init_state(&store, |_| true);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), ndarray::arr1(&[3.0, -0.5]).into_dyn());
        adam.step(&mut store, &grads).unwrap();
        let w = store.get("w").unwrap();
        assert!((w[0] - 0.9).abs() < 1e-8);
        assert!((w[1] + 1.9).abs() < 1e-8);
        assert_eq!(adam.state_bytes(), 4 * 8);
    }
}
