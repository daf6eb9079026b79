//! Command-line surface. Tunable options are optional so that a JSON config
//! file can supply them; a flag given on the command line always wins.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "introspect", version, about = "Uncertainty-based help triggers for robot policy rollouts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic rollout dataset (defaults to the S1 configuration).
    GenSynth(GenSynth),
    /// Summarize the token features of a dataset.
    ExtractFeatures(ExtractFeatures),
    /// Train a strong (step-label) or weak (episode-label) classifier.
    Train(Train),
    /// Calibrate a conformal threshold on step entropy or perplexity.
    CalibrateCp(CalibrateCp),
    /// Cross-validate a method and write a metrics report.
    Evaluate(Evaluate),
    /// Serve help decisions over newline-delimited JSON.
    Monitor(Monitor),
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOpts {
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Number of episodes.
    #[arg(long)]
    pub episodes: Option<usize>,
    #[arg(long)]
    pub failure_fraction: Option<f64>,
    #[arg(long)]
    pub steps_min: Option<usize>,
    #[arg(long)]
    pub steps_max: Option<usize>,
    #[arg(long)]
    pub tokens_min: Option<usize>,
    #[arg(long)]
    pub tokens_max: Option<usize>,
    #[arg(long)]
    pub onset_min: Option<f64>,
    #[arg(long)]
    pub onset_max: Option<f64>,
    #[arg(long)]
    pub nominal_concentration: Option<f64>,
    #[arg(long)]
    pub degraded_concentration: Option<f64>,
    #[arg(long)]
    pub step_spread: Option<f64>,
    #[arg(long)]
    pub token_spread: Option<f64>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOpts {
    /// Token width N of the feature matrix.
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub ff_dim: Option<usize>,
    #[arg(long)]
    pub head_hidden: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Top logits used as Dirichlet evidence.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Log-sum-exp pooling temperature for weak training.
    #[arg(long)]
    pub pool_beta: Option<f64>,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOpts {
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_steps: Option<usize>,
    #[arg(long)]
    pub batch_episodes: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Decision threshold on sigmoid(logit).
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Weight on the positive-class loss term.
    #[arg(long)]
    pub pos_weight: Option<f64>,
    /// Fraction of training episodes held out for early stopping.
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Score {
    Entropy,
    Perplexity,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Strong,
    Weak,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    Max,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CpOpts {
    #[arg(long, value_enum)]
    pub score: Option<Score>,
    #[arg(long, value_enum)]
    pub regime: Option<Regime>,
    /// Miss-rate budget.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Reduction of token entropies to a step entropy.
    #[arg(long, value_enum)]
    pub aggregation: Option<Aggregation>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Transformer,
    Cp,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Text,
    Json,
}

#[derive(Args, Debug)]
pub struct GenSynth {
    /// Output dataset (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with option values; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub synth: SynthOpts,
}

#[derive(Args, Debug)]
pub struct ExtractFeatures {
    #[arg(long)]
    pub data: PathBuf,
    /// Write the summary here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub top_k: Option<usize>,
}

#[derive(Args, Debug)]
pub struct Train {
    #[arg(long, value_enum)]
    pub mode: Regime,
    #[arg(long)]
    pub data: PathBuf,
    /// Output checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub model: ModelOpts,
    #[command(flatten)]
    pub train: TrainOpts,
}

#[derive(Args, Debug)]
pub struct CalibrateCp {
    #[arg(long)]
    pub data: PathBuf,
    /// Output threshold (JSON).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub cp: CpOpts,
}

#[derive(Args, Debug)]
pub struct Evaluate {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub method: Method,
    /// Supervision of the transformer.
    #[arg(long, value_enum)]
    pub mode: Option<Regime>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Output report (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Format of the summary printed to standard output.
    #[arg(long, value_enum, default_value = "text")]
    pub format: OutputFormat,
    /// Name recorded in the report; defaults to the dataset file stem.
    #[arg(long)]
    pub dataset_id: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub model: ModelOpts,
    #[command(flatten)]
    pub train: TrainOpts,
    #[command(flatten)]
    pub cp: CpOpts,
}

#[derive(Args, Debug)]
pub struct Monitor {
    #[arg(long, conflicts_with = "cp_threshold", required_unless_present = "cp_threshold")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub cp_threshold: Option<PathBuf>,
    /// Listen on this TCP address instead of standard input/output.
    #[arg(long)]
    pub listen: Option<String>,
    /// Token width for methods without their own (conformal thresholds).
    #[arg(long)]
    pub max_tokens: Option<usize>,
}
