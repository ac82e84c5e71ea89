//! `vaemo`: synthetic data, caption generation, two-stage pre-training,
//! fine-tuning and evaluation from the command line.
//!
//! Every command reads `key = value` settings from an optional `--config`
//! file, then `VAEMO_SEED`, then `--key=value` arguments (last wins).

mod commands;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vaemo::config::KeyValues;
use vaemo::error::Result;

#[derive(Parser)]
#[command(
    name = "vaemo",
    version,
    about = "Audio-visual emotion representation learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Settings {
    /// Key-value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--key=value` or `--key value`.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--KEY=VALUE"
    )]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus (keys: out, n, num_classes, seed, folds, labels=class|vad).
    SynthData(Settings),
    /// Caption a corpus (keys: data, mode=stub|replay|live, fixtures, endpoint, record, passes).
    GenCaptions(Settings),
    /// Stage-1 masked and contrastive pre-training (keys: data, run, resume, stop_after).
    PretrainStage1(Settings),
    /// Stage-2 caption knowledge injection (keys: data, init, run, subset_fraction).
    InjectStage2(Settings),
    /// Fine-tune a task head and the backbone (keys: data, run, init, test_fold, task).
    Finetune(Settings),
    /// Pooled-fold evaluation (keys: data, checkpoint, folds, out).
    Evaluate(Settings),
    /// Write pooled fused embeddings (keys: data, checkpoint, out).
    ExportEmbeddings(Settings),
    /// Parameter counts for a model configuration (keys: preset=desk|paper, json).
    CountParams(Settings),
}

/// Pulls `--config` out of the trailing overrides, where clap leaves it when
/// it follows another override.
fn split_config(s: &Settings) -> (Option<PathBuf>, Vec<String>) {
    let mut config = s.config.clone();
    let mut rest = Vec::with_capacity(s.overrides.len());
    let mut it = s.overrides.iter();
    while let Some(a) = it.next() {
        if let Some(p) = a.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else if a == "--config" {
            config = it.next().map(PathBuf::from);
        } else {
            rest.push(a.clone());
        }
    }
    (config, rest)
}

fn settings(s: &Settings) -> Result<KeyValues> {
    let (config, overrides) = split_config(s);
    let mut kv = match &config {
        Some(path) => KeyValues::load(path)?,
        None => KeyValues::new(),
    };
    kv.apply_env();
    kv.apply_overrides(&overrides)?;
    Ok(kv)
}

fn run(cli: Cli) -> Result<()> {
    let (s, f): (&Settings, fn(&KeyValues) -> Result<()>) = match &cli.command {
        Command::SynthData(s) => (s, commands::synth_data),
        Command::GenCaptions(s) => (s, commands::gen_captions),
        Command::PretrainStage1(s) => (s, commands::pretrain_stage1),
        Command::InjectStage2(s) => (s, commands::inject_stage2),
        Command::Finetune(s) => (s, commands::finetune),
        Command::Evaluate(s) => (s, commands::evaluate),
        Command::ExportEmbeddings(s) => (s, commands::export),
        Command::CountParams(s) => (s, commands::count_params),
    };
    f(&settings(s)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
