//! `quasimix`: fit, select, classify, simulate and benchmark marginal
//! mixture regressions from the command line.

mod commands;
mod config;
mod output;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use quasimix::{Error, ErrorCategory};

#[derive(Parser, Debug)]
#[command(name = "quasimix", version, about = "Penalized quasi-likelihood mixtures for longitudinal data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Select lambda, fit the mixture and report estimates with standard errors.
    Fit(FitArgs),
    /// Run the lambda grid and report the BIC of every grid point.
    Select(SelectArgs),
    /// Assign subjects of a dataset to the components of a saved model.
    Classify(ClassifyArgs),
    /// Generate datasets from a built-in simulation design.
    Simulate(SimulateArgs),
    /// Run replicated fits of a simulation design and summarize them.
    Bench(BenchArgs),
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Read flags from a key=value file; flags on the command line win.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Worker threads (results do not depend on it).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Long-format CSV with one row per visit.
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// gaussian, poisson or binomial.
    #[arg(long, default_value = "gaussian")]
    pub family: String,
    #[arg(long, default_value = "id")]
    pub id_col: String,
    #[arg(long, default_value = "y")]
    pub y_col: String,
    /// Comma-separated covariate columns, in model order.
    #[arg(long, value_name = "A,B,...")]
    pub x_cols: String,
    /// Center and scale covariates before fitting.
    #[arg(long)]
    pub standardize: bool,
    /// Also standardize the response (gaussian only).
    #[arg(long)]
    pub standardize_response: bool,
    /// Comma-separated covariates left unstandardized (e.g. an intercept).
    #[arg(long, default_value = "")]
    pub exempt: String,
}

#[derive(Args, Debug, Clone)]
pub struct EmArgs {
    /// Fit at this single lambda instead of searching a grid.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// "auto" or a comma-separated list of lambda values.
    #[arg(long, default_value = "auto")]
    pub grid: String,
    #[arg(long, default_value_t = 10)]
    pub k_init: usize,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol_obj: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol_param: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub em: EmArgs,
    /// Two-step GEE refinement: ar1, cs, ind or none.
    #[arg(long, default_value = "none")]
    pub refine: String,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub em: EmArgs,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct ClassifyArgs {
    /// model.json written by `fit` or `select`.
    #[arg(long, value_name = "FILE")]
    pub model: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub data: PathBuf,
    /// Defaults to the id column recorded in the model.
    #[arg(long)]
    pub id_col: Option<String>,
    #[arg(long)]
    pub y_col: Option<String>,
    #[arg(long, value_name = "A,B,...")]
    pub x_cols: Option<String>,
    /// Use the GEE-refined parameters stored in the model.
    #[arg(long)]
    pub refined: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct SimulateArgs {
    /// ex1, ex2:<rho> or ex3.
    #[arg(long)]
    pub example: String,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Subjects per component in an extra labelled test set (0 for none).
    #[arg(long, default_value_t = 0)]
    pub test_per_component: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct BenchArgs {
    /// ex1, ex2:<rho> or ex3.
    #[arg(long)]
    pub example: String,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    /// Full-scale run with 1000 replications.
    #[arg(long)]
    pub full: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub k_init: usize,
    /// "auto" or a comma-separated list of lambda values.
    #[arg(long, default_value = "auto")]
    pub grid: String,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub tol_obj: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol_param: f64,
    /// ar1, cs, ind, none, or auto for the design's own structure.
    #[arg(long, default_value = "auto")]
    pub refine: String,
    #[arg(long, default_value_t = 100)]
    pub test_per_component: usize,
    #[command(flatten)]
    pub common: Common,
}

pub fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::Config => 2,
        ErrorCategory::Input => 3,
        ErrorCategory::Numerical => 4,
        ErrorCategory::Io => 5,
    }
}

fn report(err: &Error) -> ExitCode {
    let category = err.category();
    let line = serde_json::json!({
        "error": {
            "category": category.name(),
            "code": exit_code(category),
            "message": err.to_string(),
        }
    });
    eprintln!("{line}");
    ExitCode::from(exit_code(category))
}

fn run(args: Vec<OsString>) -> Result<(), Error> {
    let command = Cli::command().mut_subcommands(|s| s.args_override_self(true));
    let args = config::expand(args, &command)?;
    let matches = match command.clone().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            return Err(Error::Argument(first.to_string()));
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| Error::Argument(e.to_string()))?;
    let (name, sub_matches) = matches.subcommand().expect("subcommand is required");
    let sub = command.find_subcommand(name).expect("parsed subcommand exists");
    let resolved = config::resolved(sub, sub_matches);

    let common = match &cli.command {
        Cmd::Fit(a) => &a.common,
        Cmd::Select(a) => &a.common,
        Cmd::Classify(a) => &a.common,
        Cmd::Simulate(a) => &a.common,
        Cmd::Bench(a) => &a.common,
    };
    if let Some(jobs) = common.jobs {
        if jobs == 0 {
            return Err(Error::Argument("--jobs must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Error::Argument(format!("thread pool: {e}")))?;
    }

    let artifacts = match &cli.command {
        Cmd::Fit(a) => commands::fit(a)?,
        Cmd::Select(a) => commands::select(a)?,
        Cmd::Classify(a) => commands::classify_cmd(a)?,
        Cmd::Simulate(a) => commands::simulate(a)?,
        Cmd::Bench(a) => commands::bench(a)?,
    };
    artifacts.commit(&common.out, name, &resolved)
}

fn main() -> ExitCode {
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes_are_distinct() {
        let codes: std::collections::BTreeSet<u8> = [
            ErrorCategory::Config,
            ErrorCategory::Input,
            ErrorCategory::Numerical,
            ErrorCategory::Io,
        ]
        .into_iter()
        .map(exit_code)
        .collect();
        assert_eq!(codes.len(), 4);
        assert!(!codes.contains(&0));
    }
}
