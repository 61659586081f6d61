//! Run configuration files with dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vsr_core::diffusion::ScheduleConfig;
use vsr_core::tuning::TrainRunConfig;
use vsr_core::{Error, ModelConfig, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    pub tuning: TrainRunConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub inflate: InflateConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub sample: SampleConfig,
    pub paths: PathsConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Share of clips held out for sampling and evaluation.
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
}

fn default_eval_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Frames per step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub init_seed: u64,
    pub log_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 200,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            init_seed: 0,
            log_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InflateConfig {
    pub adapter_seed: u64,
    /// Random probes used to verify the inflated model.
    pub probes: usize,
}

impl Default for InflateConfig {
    fn default() -> Self {
        InflateConfig {
            adapter_seed: 1,
            probes: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub seed: u64,
    /// Upper bound on held-out clips to super-resolve.
    pub max_clips: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { seed: 0, max_clips: 8 }
    }
}

/// Locations of artifacts; relative paths are resolved against the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub image_checkpoint: PathBuf,
    pub video_checkpoint: PathBuf,
    pub finetuned_checkpoint: PathBuf,
    pub samples: PathBuf,
    /// Logs and reports.
    pub runs: PathBuf,
}

impl PathsConfig {
    fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.corpus,
            &mut self.image_checkpoint,
            &mut self.video_checkpoint,
            &mut self.finetuned_checkpoint,
            &mut self.samples,
            &mut self.runs,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

impl RunConfigFile {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.tuning.validate()?;
        self.schedule.build()?;
        let d = &self.data;
        if d.frames < 2 {
            return Err(Error::Config(format!("data.frames must be at least 2, got {}", d.frames)));
        }
        if (d.frames, d.height, d.width) != (self.model.frames, self.model.height, self.model.width) {
            return Err(Error::Config(format!(
                "data clips are {}x{}x{} (frames x height x width) but the model expects {}x{}x{}",
                d.frames, d.height, d.width, self.model.frames, self.model.height, self.model.width
            )));
        }
        if !(d.eval_fraction > 0.0 && d.eval_fraction < 1.0) {
            return Err(Error::Config(format!("data.eval_fraction must lie in (0, 1), got {}", d.eval_fraction)));
        }
        if self.pretrain.batch_size == 0 || self.pretrain.log_every == 0 {
            return Err(Error::Config("pretrain.batch_size and pretrain.log_every must be positive".into()));
        }
        Ok(())
    }
}

/// Parses `key=value`, reading the value as TOML and falling back to a bare string.
fn parse_override(spec: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let key: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if key.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override `{spec}` has an empty key segment")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((key, value))
}

fn apply_override(table: &mut toml::Table, key: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = key.split_last().expect("non-empty key");
    let mut node = table;
    for part in parents {
        node = node
            .entry(part.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{}` is not a table", key.join("."))))?;
    }
    node.insert(last.clone(), value);
    Ok(())
}

pub fn parse_config(text: &str, overrides: &[String], base: &Path) -> Result<RunConfigFile> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
    for spec in overrides {
        let (key, value) = parse_override(spec)?;
        apply_override(&mut table, &key, value)?;
    }
    let mut config: RunConfigFile = table.try_into().map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
    config.paths.resolve(base);
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfigFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, overrides, &base)
}
