use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use prunekit::pruning::PruneStrategy;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "prunekit", version, about = "Filter pruning experiments for convolutional networks")]
pub struct Cli {
    /// Seed for initialization, data order, retraining and the random criterion.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Experiment config (TOML). Flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Where artifacts and the run manifest go.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Encoding of tabular artifacts.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Small VGG-style chain, shaped by the `[tiny]` config section.
    Tiny,
    Vgg16,
    Resnet20,
    Resnet32,
    Resnet56,
    Resnet110,
    Resnet34,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Command {
    /// Build a model and train it; 0 epochs writes the initialized model.
    Train(TrainArgs),
    /// Remove filters and write the smaller model and its plan.
    Prune(PruneArgs),
    /// Per-layer FLOP and parameter counts.
    Flops(FlopsArgs),
    /// Prune each layer alone over a ratio grid and record accuracy.
    Sensitivity(SweepArgs),
    /// Test accuracy and mean inference time per batch.
    Eval(EvalArgs),
    /// Sensitivity sweeps for several criteria, merged into one table.
    Compare(CompareArgs),
    /// Re-run a recorded command and check its artifacts are identical.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Prune(_) => "prune",
            Command::Flops(_) => "flops",
            Command::Sensitivity(_) => "sensitivity",
            Command::Eval(_) => "eval",
            Command::Compare(_) => "compare",
            Command::Replay(_) => "replay",
        }
    }

    /// Resolves file arguments against the working directory, so a recorded
    /// command can be replayed from anywhere.
    pub fn with_absolute_paths(mut self) -> std::io::Result<Self> {
        let abs = |p: &mut PathBuf| -> std::io::Result<()> {
            *p = std::path::absolute(&*p)?;
            Ok(())
        };
        match &mut self {
            Command::Train(_) => {}
            Command::Prune(a) => abs(&mut a.model)?,
            Command::Flops(a) => {
                if let Some(m) = &mut a.model {
                    abs(m)?;
                }
                if let Some(b) = &mut a.baseline {
                    abs(b)?;
                }
            }
            Command::Sensitivity(a) => abs(&mut a.model)?,
            Command::Eval(a) => abs(&mut a.model)?,
            Command::Compare(a) => abs(&mut a.model)?,
            Command::Replay(a) => abs(&mut a.manifest)?,
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub arch: Arch,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
}

fn layer_ratio(s: &str) -> Result<(String, f64), String> {
    let (id, r) = s.split_once('=').ok_or_else(|| format!("expected LAYER=RATIO, got `{s}`"))?;
    let r: f64 = r.parse().map_err(|e| format!("bad ratio in `{s}`: {e}"))?;
    Ok((id.to_string(), r))
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// `LAYER=RATIO`, repeatable.
    #[arg(long = "ratio", value_parser = layer_ratio)]
    pub ratios: Vec<(String, f64)>,
    /// One rate per stage, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub stage_rates: Option<Vec<f64>>,
    /// Layers left alone by `--stage-rates`.
    #[arg(long, value_delimiter = ',')]
    pub skip: Vec<String>,
    /// Let `--stage-rates` prune projection shortcuts too.
    #[arg(long)]
    pub include_shortcuts: bool,
    #[arg(long)]
    pub criterion: Option<String>,
    #[arg(long, value_parser = parse_strategy)]
    pub strategy: Option<PruneStrategy>,
    /// Retrain for this many epochs after pruning.
    #[arg(long)]
    pub retrain_epochs: Option<usize>,
    /// Also write the same-shape masked model.
    #[arg(long)]
    pub emit_masked: bool,
}

fn parse_strategy(s: &str) -> Result<PruneStrategy, String> {
    s.parse().map_err(|e: prunekit::Error| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FlopsArgs {
    #[arg(long, required_unless_present = "arch", conflicts_with = "arch")]
    pub model: Option<PathBuf>,
    /// Count a freshly built reference architecture.
    #[arg(long, value_enum)]
    pub arch: Option<Arch>,
    /// Add reduction columns relative to this model.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub criterion: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<String>>,
    /// Retrain every cell for this many epochs.
    #[arg(long)]
    pub retrain_epochs: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct CompareArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub criteria: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    pub ratios: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<String>>,
    /// Seeds averaged for the random criterion.
    #[arg(long)]
    pub random_seeds: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// A `run.json` written by an earlier command.
    pub manifest: PathBuf,
}
