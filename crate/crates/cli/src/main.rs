//! `hetdecomp` command-line front-end.

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hetdecomp::hypothesis::SupremumRule;
use hetdecomp::simulate::CovarianceSource;
use hetdecomp::Error;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "hetdecomp", version, about = "Decompose group contrasts of aggregated treatments")]
struct Cli {
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long, global = true, env = "HETDECOMP_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate every decomposition parameter for one query.
    Decompose(RunArgs),
    /// Strong-null tests (Wald, supremum) and the single-contrast test.
    Test {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum, default_value_t = RuleArg::Sidak)]
        supremum_rule: RuleArg,
    },
    /// Power study presets or closed-form power.
    Power(PowerArgs),
    /// Coverage study preset.
    Simulate(StudyArgs),
    /// Discretization study for a continuous dose.
    Partition {
        #[command(flatten)]
        study: StudyArgs,
        /// Add a point mass at dose zero.
        #[arg(long)]
        with_atom: bool,
    },
}

#[derive(Args)]
pub struct RunArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub input: PathBuf,
    /// TOML run configuration.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub folds: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub arm: Option<String>,
    #[arg(long)]
    pub control: Option<String>,
    #[arg(long)]
    pub group: Option<String>,
    #[arg(long)]
    pub reference: Option<String>,
    #[arg(long, default_value = "hetdecomp-out")]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct StudyArgs {
    #[arg(long)]
    pub preset: Option<String>,
    /// TOML overrides of the preset's study configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub folds: Option<usize>,
    /// Comma-separated grid of J values.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<usize>>,
    /// Run power presets at 10,000 replications.
    #[arg(long)]
    pub full_scale: bool,
    #[arg(long, default_value = "hetdecomp-out")]
    pub out_dir: PathBuf,
}

#[derive(Args)]
pub struct PowerArgs {
    #[command(flatten)]
    pub study: StudyArgs,
    /// Evaluate the closed-form power functions instead of simulating.
    #[arg(long)]
    pub analytic: bool,
    #[arg(long = "J", alias = "j")]
    pub j: Option<usize>,
    /// Common standardized alternative of every version.
    #[arg(long)]
    pub xi_dense: Option<f64>,
    #[arg(long, value_enum)]
    pub covariance: Option<CovarianceArg>,
    #[arg(long, value_enum)]
    pub supremum_rule: Option<RuleArg>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum CovarianceArg {
    Sample,
    Population,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum RuleArg {
    Sidak,
    Gumbel,
}

impl From<CovarianceArg> for CovarianceSource {
    fn from(c: CovarianceArg) -> Self {
        match c {
            CovarianceArg::Sample => CovarianceSource::Sample,
            CovarianceArg::Population => CovarianceSource::Population,
        }
    }
}

impl From<RuleArg> for SupremumRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::Sidak => SupremumRule::Sidak,
            RuleArg::Gumbel => SupremumRule::Gumbel,
        }
    }
}

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub module: &'static str,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { code: 2, module: "cli", message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: 1, module: "cli", message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self { code: if e.is_input_error() { 2 } else { 1 }, module: e.module(), message: e.to_string() }
    }
}

#[derive(Serialize)]
struct ErrorDocument<'a> {
    error: &'a str,
    module: &'a str,
    kind: &'a str,
    exit_code: u8,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::input("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().map_err(|e| CliError::io(e.to_string()))?;
    }
    match cli.command {
        Command::Decompose(args) => commands::run_decompose(&args),
        Command::Test { run, supremum_rule } => commands::run_test(&run, supremum_rule.into()),
        Command::Power(mut args) => {
            let cov = args.covariance.take().map(CovarianceSource::from);
            commands::run_power(&args, cov)
        }
        Command::Simulate(args) => commands::run_simulate(&args),
        Command::Partition { study, with_atom } => commands::run_partition(&study, with_atom),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let doc = ErrorDocument {
                error: &e.message,
                module: e.module,
                kind: if e.code == 2 { "input" } else { "estimation" },
                exit_code: e.code,
            };
            eprintln!("{}", serde_json::to_string(&doc).unwrap_or_else(|_| e.message.clone()));
            ExitCode::from(e.code)
        }
    }
}
