//! Experiment driver for the constructed-transformer clustering and PCA
//! suites: instance generation, single runs, parameter sweeps, bound audits,
//! and eigenvector-recovery comparisons. Emits CSV, JSON reports, and
//! minimal SVG plots.

mod cmds;
mod svg;

use clap::{Args, Parser, Subcommand};
use std::fmt;

/// Error kinds mapped to the documented exit codes: invalid configuration
/// (2), infeasible construction (3), I/O (4), failed bound audit (1).
#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Infeasible(String),
    Io(String),
    BoundViolation(String),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Invalid(_) => "invalid_config",
            CliError::Infeasible(_) => "infeasible_construction",
            CliError::Io(_) => "io",
            CliError::BoundViolation(_) => "bound_violation",
        }
    }

    fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Io(_) => 4,
            CliError::BoundViolation(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Invalid(m)
            | CliError::Infeasible(m)
            | CliError::Io(m)
            | CliError::BoundViolation(m) => m,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind(), self.message())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<tfem::gmm::GmmError> for CliError {
    fn from(e: tfem::gmm::GmmError) -> Self {
        use tfem::gmm::GmmError::*;
        match e {
            Io(io) => CliError::Io(io.to_string()),
            RejectionBudget(_) => CliError::Infeasible(e.to_string()),
            InvalidParam(_) | InfeasibleAlpha { .. } | Parse(_) => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<tfem::classical::ClassicalError> for CliError {
    fn from(e: tfem::classical::ClassicalError) -> Self {
        use tfem::classical::ClassicalError::*;
        match e {
            InvalidParam(_) => CliError::Invalid(e.to_string()),
            RankDeficient { .. } | Linalg(_) => CliError::Infeasible(e.to_string()),
        }
    }
}

impl From<tfem::construct::ConstructError> for CliError {
    fn from(e: tfem::construct::ConstructError) -> Self {
        use tfem::construct::ConstructError::*;
        match e {
            InvalidParam(_) => CliError::Invalid(e.to_string()),
            Infeasible(_) | FitBudget { .. } | Fit(_) | Linalg(_) => {
                CliError::Infeasible(e.to_string())
            }
        }
    }
}

impl From<tfem::transformer::TransformerError> for CliError {
    fn from(e: tfem::transformer::TransformerError) -> Self {
        use tfem::transformer::TransformerError::*;
        match e {
            Io(io) => CliError::Io(io.to_string()),
            _ => CliError::Infeasible(e.to_string()),
        }
    }
}

impl From<tfem::approx::ApproxError> for CliError {
    fn from(e: tfem::approx::ApproxError) -> Self {
        use tfem::approx::ApproxError::*;
        match e {
            InvalidParam(_) => CliError::Invalid(e.to_string()),
            SingularFit { .. } => CliError::Infeasible(e.to_string()),
        }
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct Common {
    /// Master seed; every derived RNG stream is a pure function of it.
    #[arg(long)]
    pub seed: u64,
    /// Output directory (instances/, results/, plots/, reports/ live below it).
    #[arg(long, default_value = "out")]
    pub out: String,
    /// Optional TOML config file with one section per subcommand
    /// (e.g. `[sweep]`); explicit flags override file values.
    #[arg(long)]
    pub config: Option<String>,
}

#[derive(Debug, Parser)]
#[command(
    name = "tfem",
    about = "Constructed-transformer clustering/PCA experiment driver",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Sample Gaussian-mixture instances and write them as CSV files.
    Gen(cmds::GenArgs),
    /// Run one instance across the requested arms and report metrics.
    Run(cmds::RunArgs),
    /// Sweep one variable over a grid, aggregating metrics across seeds.
    Sweep(cmds::SweepArgs),
    /// Audit the softmax/hardmax bound, feature-fit decay, and construction
    /// fidelity; exits non-zero on any violation.
    AuditBounds(cmds::AuditArgs),
    /// Compare the constructed power-iteration transformer against a dense
    /// eigensolver on random SPD matrices.
    Pca(cmds::PcaArgs),
}

fn main() {
    if let Ok(w) = std::env::var("TFEM_WORKERS") {
        match w.parse::<usize>() {
            Ok(n) if n >= 1 => tfem::parallel::configure_workers(n),
            _ => {
                eprintln!(
                    "{{\"error\":\"invalid_config\",\"message\":\"TFEM_WORKERS must be a positive integer, got {w:?}\"}}"
                );
                std::process::exit(2);
            }
        }
    }
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Gen(a) => cmds::cmd_gen(a),
        Cmd::Run(a) => cmds::cmd_run(a),
        Cmd::Sweep(a) => cmds::cmd_sweep(a),
        Cmd::AuditBounds(a) => cmds::cmd_audit_bounds(a),
        Cmd::Pca(a) => cmds::cmd_pca(a),
    };
    if let Err(e) = res {
        eprintln!(
            "{{\"error\":\"{}\",\"message\":{}}}",
            e.kind(),
            serde_json::to_string(e.message()).unwrap_or_else(|_| "\"\"".into())
        );
        std::process::exit(e.exit_code());
    }
}
