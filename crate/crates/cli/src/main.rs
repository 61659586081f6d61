//! `vsr`: data generation, image pretraining, inflation, tuning, sampling and evaluation.

mod commands;
mod config;
mod png;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vsr_core::tuning::TuningMode;
use vsr_core::Error;

#[derive(Parser)]
#[command(name = "vsr", version, about = "Text-conditioned video super-resolution with inflated diffusion models")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration field, e.g. `--set tuning.mode=temporal`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the image model on individual frames.
    PretrainImage {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inflate an image checkpoint into a video checkpoint and verify it.
    Inflate {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tune a video checkpoint in one of the modes.
    Finetune {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// zero_shot, full or temporal; shorthand for `--set tuning.mode=...`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Super-resolve held-out clips.
    Sample {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score generated clips against ground truth.
    Eval {
        #[arg(long)]
        generated: PathBuf,
        /// Corpus or clip-set directory; defaults to the configured corpus.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "model")]
        label: String,
    },
    /// Parameter counts per tuning mode.
    CountParams {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut overrides = cli.overrides;
    if let Command::Finetune { mode: Some(m), .. } = &cli.command {
        TuningMode::parse(m)?;
        overrides.push(format!("tuning.mode=\"{m}\""));
    }
    let config = match &cli.config {
        Some(path) => Some(config::load_config(path, &overrides)?),
        None => None,
    };
    let need = |what: &str| {
        config
            .as_ref()
            .ok_or_else(|| Failure::Usage(format!("`{what}` needs --config")))
    };
    match cli.command {
        Command::GenData { out } => commands::gen_data(need("gen-data")?, out)?,
        Command::PretrainImage { out } => commands::pretrain(need("pretrain-image")?, out)?,
        Command::Inflate { input, out } => commands::inflate_cmd(need("inflate")?, input, out)?,
        Command::Finetune { input, out, .. } => commands::finetune(need("finetune")?, input, out)?,
        Command::Sample { input, out, seed } => commands::sample_cmd(need("sample")?, input, out, seed)?,
        Command::Eval {
            generated,
            ground_truth,
            out,
            label,
        } => {
            let gt = match ground_truth {
                Some(p) => p,
                None => need("eval without --ground-truth")?.paths.corpus.clone(),
            };
            commands::eval_cmd(&generated, &gt, out, &label)?;
        }
        Command::CountParams { checkpoint } => commands::count_params(need("count-params")?, checkpoint)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
