use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use interattr::attribution::{AttributionConfig, IntegrationConfig, ReferenceMode, Scheme};
use interattr::evaluation::AsoConfig;

use crate::Method;

#[derive(Debug, Parser)]
#[command(name = "interattr", version, about = "Interaction attributions for dual encoders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic grounded corpus manifest.
    Generate(GenerateArgs),
    /// Train a dual encoder on a corpus's train split.
    Train(TrainArgs),
    /// Compute interaction tensors (and optional heatmaps) for corpus pairs.
    Attribute(AttributeArgs),
    /// Point game, dominance tests and grounding diagnostics.
    Eval(EvalArgs),
    /// Deletion and insertion curves.
    Perturb(PerturbArgs),
    /// Serve the JSON API.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Domain {
    Primary,
    Second,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Domain::Primary)]
    pub domain: Domain,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Checkpoint to write; the loss log goes next to it as `<stem>.loss.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from this checkpoint instead of a fresh initialisation.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long)]
    pub lr_start: Option<f64>,
    #[arg(long)]
    pub lr_end: Option<f64>,
}

#[derive(Clone, Debug, Args)]
pub struct IntegrationArgs {
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value = "right")]
    pub scheme: Scheme,
    /// Integrate from zero tap values instead of the black image and the
    /// all-padding caption.
    #[arg(long)]
    pub zero_ref: bool,
    #[arg(long)]
    pub tap: Option<String>,
}

impl IntegrationArgs {
    pub fn config(&self) -> AttributionConfig {
        AttributionConfig {
            integration: IntegrationConfig::new(self.steps, self.scheme),
            tap: self.tap.clone(),
            reference: if self.zero_ref { ReferenceMode::ZeroAtTap } else { ReferenceMode::Inputs },
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct AttributeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = Method::Ours)]
    pub method: Method,
    #[command(flatten)]
    pub integration: IntegrationArgs,
    /// Pair ids; every pair of `--split` when omitted.
    #[arg(long = "pair")]
    pub pairs: Vec<String>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Also write one PGM heatmap and JSON sidecar per annotated span.
    #[arg(long)]
    pub heatmaps: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long = "method", value_delimiter = ',', default_values_t = [Method::Ours, Method::Icam, Method::ItsmOut, Method::ItsmHidden])]
    pub methods: Vec<Method>,
    #[command(flatten)]
    pub integration: IntegrationArgs,
    /// Compare the first method under this checkpoint against the base one.
    #[arg(long)]
    pub tuned_checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Also compute mean perturbation AUCs.
    #[arg(long)]
    pub auc: bool,
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.001)]
    pub significance: f64,
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report JSON; a CSV summary is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

impl EvalArgs {
    pub fn aso(&self) -> AsoConfig {
        AsoConfig {
            epsilon: self.epsilon,
            significance: self.significance,
            bootstrap: self.bootstrap,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long = "method", value_delimiter = ',', default_values_t = [Method::Ours])]
    pub methods: Vec<Method>,
    #[command(flatten)]
    pub integration: IntegrationArgs,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Curves JSON; the AUC table is written next to it as CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Concurrent attribution jobs; defaults to the number of cores.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
