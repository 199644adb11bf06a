use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fimmerge_core::merge::{MergeMethod, TrimMode};

#[derive(Debug, Parser)]
#[command(name = "fimmerge", version, about = "Fisher-guided layer-adaptive checkpoint merging")]
pub struct Cli {
    /// Seed for every random stream the command uses.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Directory receiving the run manifest.
    #[arg(long, global = true, default_value = ".")]
    pub report_dir: PathBuf,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the diagonal Fisher of a micro checkpoint.
    Fim(FimArgs),
    /// Merge a fine-tuned checkpoint into its base.
    Merge(MergeArgs),
    /// Run the numerical theory checks.
    Verify(VerifyArgs),
    /// Per-layer nonlinearity score against relative merge error.
    AnalyzeNl(NlArgs),
    /// Train a base/tuned micro checkpoint pair on synthetic rules.
    MicroPair(PairArgs),
    /// Sensitivity sweeps on the micro pipeline.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct FimArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Micro-model config JSON; defaults to `<model stem>.config.json`.
    #[arg(long)]
    pub arch_config: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long, value_enum, default_value_t = ReductionArg::Mean)]
    pub reduction: ReductionArg,
    /// Naming scheme (TOML or JSON) for parameter classification.
    #[arg(long)]
    pub naming: Option<PathBuf>,
    #[arg(long, default_value = "fim.json")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ReductionArg {
    Mean,
    Sum,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub tuned: PathBuf,
    /// FIM interchange JSON.
    #[arg(long)]
    pub fim: Option<PathBuf>,
    /// Complete plan JSON; replaces every plan flag below.
    #[arg(long, conflicts_with_all = ["method", "trim_ratio", "trim_mode", "gate_factor", "norm_eps", "signal", "alpha_theta", "probe_count", "no_fim_fallback"])]
    pub plan: Option<PathBuf>,
    #[arg(long, default_value = "ties")]
    pub method: MergeMethod,
    #[arg(long, default_value_t = 0.2)]
    pub trim_ratio: f64,
    #[arg(long, default_value = "per-tensor")]
    pub trim_mode: TrimMode,
    #[arg(long, default_value_t = 0.7)]
    pub gate_factor: f64,
    /// Calibration threshold; `inf` disables calibration.
    #[arg(long, default_value_t = 0.05)]
    pub norm_eps: f64,
    /// fim_x_delta, fim_only or delta_norm.
    #[arg(long, default_value = "fim_x_delta")]
    pub signal: String,
    /// Fixed sigmoid sharpness instead of the adaptive one.
    #[arg(long)]
    pub alpha_theta: Option<f64>,
    #[arg(long, default_value_t = 8)]
    pub probe_count: usize,
    /// Refuse to trim tensors that lack an elementwise Fisher.
    #[arg(long)]
    pub no_fim_fallback: bool,
    #[arg(long)]
    pub naming: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VerifyMode {
    Bound,
    Fisher,
    Quadratic,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum)]
    pub mode: VerifyMode,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Euclidean norm of the perturbation (bound and quadratic modes).
    #[arg(long)]
    pub delta_scale: Option<f64>,
    /// Coordinates carrying the perturbation in bound mode.
    #[arg(long, default_value_t = 48)]
    pub subset_size: usize,
    #[arg(long)]
    pub report: PathBuf,
    /// Per-trial CSV (bound mode).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NlArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub tuned: PathBuf,
    #[arg(long)]
    pub arch_config: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, default_value_t = 8)]
    pub probes: usize,
    #[arg(long, default_value = "nl.csv")]
    pub out: PathBuf,
    /// Whitespace-separated copy of the table for plotting tools.
    #[arg(long)]
    pub dat: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PairArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Micro-model config JSON; defaults to the built-in configuration.
    #[arg(long)]
    pub arch_config: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    pub base_steps: usize,
    #[arg(long, default_value_t = 100)]
    pub tuned_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Theta,
    Signals,
    FimN,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub kind: SweepKind,
    /// Fixed sharpness values for the theta sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3])]
    pub thetas: Vec<f64>,
    /// Sample counts for the Fisher sweep.
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 8, 16])]
    pub counts: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
}
