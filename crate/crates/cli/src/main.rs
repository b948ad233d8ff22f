//! `vollab` command-line driver.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use vollab_core::backtest::WindowMode;
use vollab_core::models::ModelKind;

const SUBCOMMANDS: [&str; 6] = ["gen-data", "fit-garch", "backtest", "check-noarb", "explain", "report"];

#[derive(Debug, Parser)]
#[command(name = "vollab", version, about = "GARCH-driven put pricing models: data, backtests, arbitrage checks and attribution")]
struct Cli {
    /// Cap on worker threads (default: one per core).
    #[arg(long, global = true, env = "VOLLAB_JOBS")]
    jobs: Option<usize>,

    /// File of `key=value` lines used as default flags for the subcommand.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a filtered synthetic put panel.
    #[command(args_override_self = true)]
    GenData(GenDataArgs),
    /// Attach rolling GARCH volatility forecasts to a panel.
    #[command(args_override_self = true)]
    FitGarch(FitGarchArgs),
    /// Walk-forward training and MAPE evaluation.
    #[command(args_override_self = true)]
    Backtest(BacktestArgs),
    /// Strike and maturity perturbation checks on a trained pricer.
    #[command(args_override_self = true)]
    CheckNoarb(CheckNoarbArgs),
    /// Shapley attributions and feature PCA for a trained pricer.
    #[command(args_override_self = true)]
    Explain(ExplainArgs),
    /// Summarize a backtest report across windows.
    #[command(args_override_self = true)]
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::FitGarch(_) => "fit-garch",
            Command::Backtest(_) => "backtest",
            Command::CheckNoarb(_) => "check-noarb",
            Command::Explain(_) => "explain",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trading days to simulate.
    #[arg(long, default_value_t = 1008)]
    pub days: usize,
    #[arg(long, default_value = "2000-01-03")]
    pub start_date: NaiveDate,
    #[arg(long, default_value_t = 1000.0)]
    pub s0: f64,
    #[arg(long, default_value_t = 25.0)]
    pub strike_step: f64,
    /// Target maturities in months.
    #[arg(long, value_delimiter = ',', default_value = "1,3,6,12")]
    pub maturities: Vec<u32>,
    /// Half-width of the uniform relative price noise.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Volatility added per unit of ln(K/S).
    #[arg(long, default_value_t = 0.0)]
    pub skew: f64,
    #[arg(long, default_value_t = 0.018)]
    pub dividend_yield: f64,
    /// Zero curve CSV (tenor_years, zero_rate); a built-in curve otherwise.
    #[arg(long)]
    pub rate_curve: Option<PathBuf>,
    #[arg(long)]
    pub moneyness_min: Option<f64>,
    #[arg(long)]
    pub moneyness_max: Option<f64>,
    #[arg(long, default_value_t = 3e-4)]
    pub garch_mu: f64,
    #[arg(long, default_value_t = 2e-6)]
    pub garch_a0: f64,
    /// Weight on the lagged variance.
    #[arg(long, default_value_t = 0.9)]
    pub garch_a1: f64,
    /// Weight on the lagged squared innovation.
    #[arg(long, default_value_t = 0.07)]
    pub garch_b1: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitGarchArgs {
    #[arg(long)]
    pub panel: PathBuf,
    /// Returns per estimation window.
    #[arg(long, default_value_t = 252)]
    pub window: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the daily parameter estimates here.
    #[arg(long)]
    pub params_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Expanding,
    Rolling,
}

impl From<ModeArg> for WindowMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Expanding => WindowMode::Expanding,
            ModeArg::Rolling => WindowMode::Rolling,
        }
    }
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    #[arg(long)]
    pub panel: PathBuf,
    #[arg(long, value_enum, default_value = "expanding")]
    pub mode: ModeArg,
    #[arg(long, value_delimiter = ',', default_value = "nn,rf,lr,bs")]
    pub models: Vec<ModelKind>,
    /// Use the Black-Scholes price as an input feature (default).
    #[arg(long, overrides_with = "no_bs")]
    pub with_bs: bool,
    #[arg(long, overrides_with = "with_bs")]
    pub no_bs: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Save every trained model to this JSON artifact.
    #[arg(long)]
    pub models_out: Option<PathBuf>,
    #[arg(long)]
    pub nn_max_epochs: Option<usize>,
    #[arg(long)]
    pub nn_learning_rate: Option<f64>,
    #[arg(long)]
    pub nn_batch_size: Option<usize>,
    #[arg(long)]
    pub rf_trees: Option<usize>,
    #[arg(long)]
    pub rf_max_depth: Option<usize>,
    /// Features tried per split (default: all of them).
    #[arg(long)]
    pub rf_features_per_split: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CheckNoarbArgs {
    #[arg(long)]
    pub panel: PathBuf,
    /// Model artifact from `backtest --models-out`; not needed with `--model bs`.
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long, default_value = "nn")]
    pub model: ModelKind,
    /// Window label; the last window in the artifact by default.
    #[arg(long)]
    pub window: Option<String>,
    #[arg(long, default_value_t = 1000)]
    pub sample: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Pass-rate summary JSON (default: `<out>.summary.json`).
    #[arg(long)]
    pub summary_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ClassArg {
    Otm,
    Itm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MaskingArg {
    Marginal,
    Mean,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long)]
    pub panel: PathBuf,
    #[arg(long, default_value = "nn")]
    pub model: ModelKind,
    #[arg(long)]
    pub window: Option<String>,
    /// Test rows explained.
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "otm")]
    pub class: ClassArg,
    #[arg(long, value_enum, default_value = "marginal")]
    pub masking: MaskingArg,
    /// Background rows for marginal masking.
    #[arg(long, default_value_t = 100)]
    pub background: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Mean |phi| ranking (default: `<out>.ranking.csv`).
    #[arg(long)]
    pub ranking_out: Option<PathBuf>,
    /// Loadings of the training features on the first principal components.
    #[arg(long)]
    pub pca_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match config::expand_config(argv, &SUBCOMMANDS) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let name = cli.command.name();
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a, &argv),
        Command::FitGarch(a) => commands::fit_garch(a, &argv),
        Command::Backtest(a) => commands::backtest(a, &argv),
        Command::CheckNoarb(a) => commands::check_noarb(a, &argv),
        Command::Explain(a) => commands::explain(a, &argv),
        Command::Report(a) => commands::report(a, &argv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {name}: {e:#}");
            ExitCode::from(1)
        }
    }
}
