mod commands;
mod config;
mod heatmap;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pfa_core::ErrorClass;

use config::{DataArgs, ModelArgs};

#[derive(Debug, Parser)]
#[command(name = "pfa", version, about = "Perturbed factor analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the model and write loadings, summaries and group divergences
    Fit(FitArgs),
    /// Choose the perturbation variance by held-out predictive likelihood
    CvAlpha(CvArgs),
    /// Generate a synthetic dataset together with its ground truth
    Simulate(SimulateArgs),
    /// Pairwise group divergences from a stored chain or a fresh fit
    Diverge(DivergeArgs),
    /// Score new observations under a stored chain
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    /// Also write every retained draw to chain.json
    #[arg(long = "emit-chain")]
    emit_chain: bool,
    /// Also write PNG heatmaps of the loadings and divergences
    #[arg(long)]
    heatmaps: bool,
}

#[derive(Debug, Args)]
struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated candidate values of alpha
    #[arg(long = "alpha-grid", value_delimiter = ',')]
    alpha_grid: Option<Vec<f64>>,
    /// Number of random half splits
    #[arg(long)]
    splits: Option<usize>,
    /// Tie tolerance in paired standard errors
    #[arg(long = "tie-se")]
    tie_se: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Case {
    #[value(alias = "1")]
    Single,
    #[value(alias = "2")]
    Multigroup,
    #[value(alias = "3")]
    Partial,
    #[value(alias = "4")]
    Additive,
    Observation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Variant {
    Separate,
    Loadings,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    case: Case,
    /// Loading fixture: 1 (21 variables) or 2 (128 variables)
    #[arg(long, default_value_t = 1)]
    fixture: u8,
    /// Perturbation variance of the generating process
    #[arg(long, default_value_t = 1e-4)]
    alpha0: f64,
    /// Observations for the single-group and observation cases
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Residual standard deviation for the single-group case
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Mean of the additive group effects
    #[arg(long = "psi-mean", default_value_t = 0.0)]
    psi_mean: f64,
    /// Standard deviation of the additive group effects
    #[arg(long = "psi-sd", default_value_t = 1.0)]
    psi_sd: f64,
    #[arg(long, value_enum, default_value_t = Variant::Separate)]
    variant: Variant,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct DivergeArgs {
    /// chain.json written by `fit --emit-chain` in group mode
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    chain: Option<PathBuf>,
    /// Fit a group-mode model to this CSV first
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long = "group-col", requires = "input")]
    group_col: Option<String>,
    #[arg(long = "reference-group", requires = "input")]
    reference_group: Option<String>,
    #[arg(long = "log-transform", requires = "input")]
    log_transform: bool,
    #[command(flatten)]
    model: ModelArgs,
    /// Also write pairwise Hotelling T² statistics (needs --input)
    #[arg(long, requires = "input")]
    hotelling: bool,
    #[arg(long)]
    heatmaps: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    chain: PathBuf,
    /// CSV with the training variables as columns
    #[arg(long)]
    input: PathBuf,
    #[arg(long = "group-col")]
    group_col: Option<String>,
    #[arg(long = "log-transform")]
    log_transform: bool,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::CvAlpha(a) => commands::cv_alpha(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Diverge(a) => commands::diverge(a),
        Command::Predict(a) => commands::predict(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
