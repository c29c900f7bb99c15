mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cpsc::CpscError;

/// Exit codes. Argument errors detected by clap also exit with 2.
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_CALIBRATION: u8 = 4;
pub const EXIT_GRADCHECK: u8 = 5;

#[derive(Parser, Debug)]
#[command(name = "cpsc", version, about = "Conformal predictive self-calibration on synthetic multimodal data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seeds: comma list and/or inclusive ranges, e.g. `0..4` or `0,3,7`.
    /// CPSC_SEED, when set, replaces the list with that single seed.
    #[arg(long, default_value = "0..4")]
    pub seeds: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Warm-up plus self-calibration (or baseline) training per seed.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Switch off parts of the method; may be repeated.
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        #[arg(long, value_enum, default_value_t = MethodArg::Cpsc)]
        method: MethodArg,
    },
    /// Coverage and set size of a frozen model over resampled
    /// calibration/test draws.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Model checkpoint; a fresh warm-up per seed when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Overrides the configured risk level.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long, default_value_t = 20)]
        rounds: usize,
        #[arg(long, default_value_t = 500)]
        cal_size: usize,
        #[arg(long, default_value_t = 2000)]
        test_size: usize,
    },
    /// Analytic vs finite-difference gradients of the full objective.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Negative control: perturb the analytic gradient before comparing.
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Cartesian run over one axis × seeds × {baseline, cpsc}.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Keep every component (K_sel = n) and drop the diversity loss.
    Rsc,
    /// Unit unimodal weights (a = 0, b = 1).
    Gsc,
    /// No warm-up epochs.
    Warmup,
    /// Drop the diversity loss only.
    Div,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodArg {
    Cpsc,
    Baseline,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
#[value(rename_all = "snake_case")]
pub enum Axis {
    Optimizer,
    CpInterval,
    Alpha,
    Noise,
}

/// An argument value that parsed but makes no sense.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Raised by `gradcheck` when a block exceeds the tolerance.
#[derive(Debug)]
pub struct GradcheckFailed(pub usize);

impl std::fmt::Display for GradcheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} parameter blocks exceeded the tolerance", self.0)
    }
}

impl std::error::Error for GradcheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    if err.downcast_ref::<GradcheckFailed>().is_some() {
        return EXIT_GRADCHECK;
    }
    match err.downcast_ref::<CpscError>() {
        Some(CpscError::Config(_)) => EXIT_USAGE,
        Some(CpscError::Numeric(_)) => EXIT_NUMERIC,
        Some(CpscError::Calibration(_)) => EXIT_CALIBRATION,
        _ => EXIT_FAILURE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            common,
            out,
            ablate,
            method,
        } => commands::train(&common, &out, &ablate, method),
        Command::Audit {
            common,
            out,
            checkpoint,
            alpha,
            rounds,
            cal_size,
            test_size,
        } => commands::audit(&common, &out, checkpoint.as_deref(), alpha, rounds, cal_size, test_size),
        Command::Gradcheck {
            common,
            batch,
            tolerance,
            corrupt_backward,
        } => commands::gradcheck(&common, batch, tolerance, corrupt_backward),
        Command::Sweep {
            common,
            out,
            axis,
            values,
        } => commands::sweep(&common, &out, axis, &values),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
