//! Command-line front end. [`run`] parses the arguments, executes one
//! subcommand inside a rayon pool of the requested size, and writes a
//! `manifest.json` next to the outputs.
//!
//! Exit codes: 0 success, 1 usage error, 2 malformed input file,
//! 3 numerical failure.

mod commands;
mod manifest;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

pub use manifest::{Manifest, MANIFEST_FILE};

/// Environment variable that overrides the default seed.
pub const SEED_ENV: &str = "IARAUDIT_SEED";
pub const DEFAULT_SEED: u64 = 7;

/// Failure class attached as context to errors; selects the exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Failure {
    Usage,
    Input,
    Numeric,
}

impl Failure {
    pub fn exit_code(self) -> i32 {
        match self {
            Failure::Usage => 1,
            Failure::Input => 2,
            Failure::Numeric => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Failure::Usage => "usage error",
            Failure::Input => "malformed input",
            Failure::Numeric => "numerical failure",
        })
    }
}

pub(crate) trait Classify<T> {
    fn usage(self) -> anyhow::Result<T>;
    fn input(self) -> anyhow::Result<T>;
    fn numeric(self) -> anyhow::Result<T>;
}

impl<T, E> Classify<T> for Result<T, E>
where
    E: std::error::Error + Send + Sync + 'static,
{
    fn usage(self) -> anyhow::Result<T> {
        self.map_err(|e| anyhow::Error::new(e).context(Failure::Usage))
    }
    fn input(self) -> anyhow::Result<T> {
        self.map_err(|e| anyhow::Error::new(e).context(Failure::Input))
    }
    fn numeric(self) -> anyhow::Result<T> {
        self.map_err(|e| anyhow::Error::new(e).context(Failure::Numeric))
    }
}

pub(crate) fn fail(kind: Failure, msg: impl fmt::Display) -> anyhow::Error {
    anyhow::anyhow!("{msg}").context(kind)
}

#[derive(Debug, Parser)]
#[command(
    name = "iaraudit",
    version,
    about = "Privacy auditing for image autoregressive models"
)]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct Global {
    /// Worker threads; results do not depend on it. Defaults to all cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Toy simulator: corpus generation, model fitting, trace export.
    #[command(subcommand)]
    Sim(SimCommand),
    /// Membership inference attacks.
    #[command(subcommand)]
    Attack(AttackCommand),
    /// Dataset inference.
    #[command(subcommand)]
    Di(DiCommand),
    /// Training data extraction.
    #[command(subcommand)]
    Extract(ExtractCommand),
    /// Noise defense.
    #[command(subcommand)]
    Defend(DefendCommand),
    /// Collects the results of earlier runs into one report.
    Report(ReportArgs),
    /// Re-runs the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Subcommand)]
pub enum SimCommand {
    /// Generates a labeled corpus.
    Gen(GenArgs),
    /// Fits the toy model on a corpus.
    Fit(FitArgs),
    /// Exports per-token traces of the evaluation samples.
    Export(ExportArgs),
}

#[derive(Debug, Subcommand)]
pub enum AttackCommand {
    /// Scores every sample of a trace.
    Score(ScoreArgs),
    /// Scores and evaluates attacks: ROC, AUC and TPR at 1% FPR.
    Eval(EvalArgs),
}

#[derive(Debug, Subcommand)]
pub enum DiCommand {
    /// Tests suspect against validation samples and searches the minimal
    /// number of samples needed to reject.
    Run(DiArgs),
}

#[derive(Debug, Subcommand)]
pub enum ExtractCommand {
    /// Ranks candidates, completes them from a prefix and applies the
    /// similarity threshold.
    Run(ExtractArgs),
}

#[derive(Debug, Subcommand)]
pub enum DefendCommand {
    /// Evaluates attacks, dataset inference, extraction and utility over a
    /// range of noise levels.
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Discrete,
    Continuous,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON simulator config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub members_per_class: Option<usize>,
    #[arg(long)]
    pub nonmembers_per_class: Option<usize>,
    #[arg(long)]
    pub canaries: Option<usize>,
    #[arg(long)]
    pub duplication: Option<usize>,
    #[arg(long)]
    pub source_concentration: Option<f64>,
    #[arg(long)]
    pub class_sharing: Option<f64>,
    #[arg(long)]
    pub walk_max: Option<f64>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub s_max: Option<u32>,
    #[arg(long)]
    pub token_noise: Option<f64>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct FitArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// n-gram context length.
    #[arg(long)]
    pub order: Option<usize>,
    /// Additive smoothing.
    #[arg(long)]
    pub smoothing: Option<f64>,
    #[arg(long)]
    pub p_drop: Option<f64>,
    #[arg(long)]
    pub icl_weight: Option<f64>,
    #[arg(long)]
    pub fit_stride: Option<u32>,
    #[arg(long)]
    pub fit_draws: Option<usize>,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub trace: TraceArgs,
    /// Write an uncompressed `trace.jsonl` instead of `trace.jsonl.gz`.
    #[arg(long)]
    pub plain: bool,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct TraceArgs {
    /// Diffusion timestep (continuous).
    #[arg(long, default_value_t = 500)]
    pub timestep: u32,
    /// Fraction of masked tokens (continuous).
    #[arg(long, default_value_t = 0.95)]
    pub mask_ratio: f64,
    /// Noise draws per masked token (continuous).
    #[arg(long, default_value_t = 64)]
    pub repeats: usize,
    /// Skip the unconditional and difference blocks.
    #[arg(long)]
    pub no_diff: bool,
    /// Skip the repeated-input block.
    #[arg(long)]
    pub no_repeated: bool,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct AttackSelection {
    /// `default`, `grid`, or a comma-separated list such as
    /// `loss@diff,min_k@cond[k=20]`.
    #[arg(long, default_value = "default")]
    pub attacks: String,
    /// Percentages for the k-parameterized attacks when `--attacks grid`.
    #[arg(long, default_value = "10,20,30,40,50")]
    pub k_grid: String,
    /// Thresholds for the eps-parameterized attacks when `--attacks grid`.
    #[arg(long, default_value = "2,4,8,16")]
    pub eps_grid: String,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct ScoreArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub selection: AttackSelection,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub selection: AttackSelection,
    /// Randomized subsampling trials.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Fraction of each split drawn per trial.
    #[arg(long, default_value_t = 0.5)]
    pub subsample: f64,
    /// False positive rate for the TPR column.
    #[arg(long, default_value_t = 0.01)]
    pub fpr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiSets {
    /// Members against nonmembers.
    Members,
    /// Two disjoint halves of the nonmembers, a false-positive check.
    NonmemberHalves,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct DiArgs {
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    pub selection: AttackSelection,
    #[arg(long, value_enum, default_value = "members")]
    pub sets: DiSets,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    /// Comma-separated sample counts; defaults to 2,4,6,8,10,20,... up to
    /// the size of the smaller set.
    #[arg(long)]
    pub di_grid: Option<String>,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0.95)]
    pub required_rate: f64,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct ExtractArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Prefix length; defaults to 8 tokens (discrete) or 5 (continuous).
    #[arg(long)]
    pub prefix_len: Option<usize>,
    /// Prefix lengths for the extracted-count and false-positive sweep.
    #[arg(long, default_value = "2,4,8,16")]
    pub prefix_sweep: String,
    #[arg(long, default_value_t = 0.75)]
    pub tau: f64,
    /// Candidates kept per class.
    #[arg(long, default_value_t = 5)]
    pub top_n: usize,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "0,0.5,1,2,4")]
    pub sigma_grid: String,
    /// Attack whose TPR is tracked; defaults to the loss attack on the
    /// difference (discrete) or conditional loss (continuous) block.
    #[arg(long)]
    pub attack: Option<String>,
    /// Attacks used for dataset inference.
    #[arg(long, default_value = "default")]
    pub attacks: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub trace: TraceArgs,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0.5)]
    pub subsample: f64,
    /// Trials per grid point of the dataset inference search.
    #[arg(long, default_value_t = 100)]
    pub di_trials: usize,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.95)]
    pub required_rate: f64,
    #[arg(long)]
    pub prefix_len: Option<usize>,
    #[arg(long, default_value_t = 0.75)]
    pub tau: f64,
    #[arg(long, default_value_t = 5)]
    pub top_n: usize,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    /// Output directories of earlier runs.
    #[arg(long = "from", required = true, num_args = 1..)]
    pub from: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs the command line `argv` (program name first) and returns the exit
/// code. Errors are printed to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() || e.kind() == clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand {
                Failure::Usage.exit_code()
            } else {
                0
            };
        }
    };
    match commands::execute(cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            e.downcast_ref::<Failure>()
                .copied()
                .unwrap_or(Failure::Numeric)
                .exit_code()
        }
    }
}
