mod commands;
mod svg;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

/// Exit statuses.
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_VALIDATION: u8 = 3;
pub const EXIT_SOLVER: u8 = 4;
pub const EXIT_CHECK: u8 = 5;

#[derive(Parser, Debug)]
#[command(name = "delay-mfg", version, about = "LQG mean-field games with state and control delay")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: CliOptions,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Check the standing assumptions of a model.
    Validate,
    /// Compute the consistency field m0.
    Nce,
    /// Riccati decoupling and feedback for the no-delay-in-dynamics structure.
    Case1,
    /// Explicit costate of the pure-delay structure.
    Case2,
    /// Simulate the coupled and limit systems under the equilibrium rule.
    Simulate,
    /// Solve the exact tree oracle and cross-check it.
    OracleCheck,
    /// Monte Carlo convergence rates over population sizes.
    RateScan,
    /// Sampled epsilon-Nash gaps over population sizes.
    NashScan,
}

#[derive(Args, Debug, Default, Clone)]
struct CliOptions {
    /// Model JSON file.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Grid step; defaults to the step stored in the model.
    #[arg(long = "grid-h", global = true)]
    grid_h: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Population sizes, comma separated.
    #[arg(long = "n-list", global = true, value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    /// Monte Carlo replications.
    #[arg(long, global = true)]
    reps: Option<usize>,
    /// JSON file with the same keys; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Also write SVG plots.
    #[arg(long, global = true)]
    plot: bool,
    /// Run replications on one thread.
    #[arg(long, global = true)]
    sequential: bool,
}

/// Keys accepted in a config file.
#[derive(Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    model: Option<PathBuf>,
    grid_h: Option<f64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    n_list: Option<Vec<usize>>,
    reps: Option<usize>,
    plot: Option<bool>,
    sequential: Option<bool>,
}

/// Resolved experiment configuration.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub command: Command,
    pub model: PathBuf,
    pub grid_h: Option<f64>,
    pub seed: u64,
    pub out: PathBuf,
    pub n_list: Vec<usize>,
    pub reps: usize,
    pub plot: bool,
    pub sequential: bool,
}

/// A failed run: exit status and message.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<delay_mfg::Error> for Failure {
    fn from(e: delay_mfg::Error) -> Self {
        use delay_mfg::Error as E;
        let code = match &e {
            E::NoConvergence { .. } | E::RiccatiDivergence { .. } | E::BlowUp { .. } => EXIT_SOLVER,
            E::Structure(_) | E::Assumption(_) | E::Singular(_) => EXIT_VALIDATION,
            E::Io(_) | E::Json(_) | E::Divisibility { .. } | E::InvalidParameter(_) | E::Dimension { .. } => EXIT_CONFIG,
            _ => 1,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::new(1, e.to_string())
    }
}

fn resolve(cli: Cli) -> Result<ExperimentConfig, Failure> {
    let file = match &cli.opts.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot read config {}: {e}", path.display())))?;
            serde_json::from_str::<ConfigFile>(&text)
                .map_err(|e| Failure::new(EXIT_CONFIG, format!("bad config {}: {e}", path.display())))?
        }
        None => ConfigFile::default(),
    };
    let o = cli.opts;
    let model = o
        .model
        .or(file.model)
        .ok_or_else(|| Failure::new(EXIT_CONFIG, "--model is required"))?;
    let n_list = o.n_list.or(file.n_list).unwrap_or_else(|| vec![4, 8, 16, 32, 64]);
    if n_list.windows(2).any(|w| w[0] >= w[1]) || n_list.first().is_none_or(|&n| n < 2) {
        return Err(Failure::new(EXIT_CONFIG, "--n-list must be strictly increasing with entries >= 2"));
    }
    if matches!(cli.command, Command::RateScan) && n_list.len() < 3 {
        return Err(Failure::new(EXIT_CONFIG, "rate fits need at least three population sizes"));
    }
    let reps = o.reps.or(file.reps).unwrap_or(2000);
    if reps < 2 {
        return Err(Failure::new(EXIT_CONFIG, "--reps must be at least 2"));
    }
    Ok(ExperimentConfig {
        command: cli.command,
        model,
        grid_h: o.grid_h.or(file.grid_h),
        seed: o.seed.or(file.seed).unwrap_or(2024),
        out: o.out.or(file.out).unwrap_or_else(|| PathBuf::from("out")),
        n_list,
        reps,
        plot: o.plot || file.plot.unwrap_or(false),
        sequential: o.sequential || file.sequential.unwrap_or(false),
    })
}

fn sha256_hex(path: &Path) -> Result<String, Failure> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)
        .map_err(|e| Failure::new(EXIT_CONFIG, format!("cannot read model {}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = resolve(cli).and_then(|config| {
        let hash = sha256_hex(&config.model)?;
        commands::run(&config, &hash)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
