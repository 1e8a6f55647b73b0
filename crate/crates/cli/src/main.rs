//! `facweight`: balancing-weight estimation of factorial effects from CSV
//! data, simulation studies and covariate balance diagnostics.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use factorial_weights::simulation::{Outcome, ScenarioKind};
use factorial_weights::{Error, ModelFlavor};

use config::{FactorCoding, OutputFormat, RunConfig, Unobserved};

#[derive(Parser)]
#[command(
    name = "facweight",
    version,
    about = "Factorial effects from observational data via balancing weights"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit balancing weights and estimate every effect up to the chosen order.
    Estimate {
        #[command(flatten)]
        data: DataArgs,
        /// Effects report destination (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        format: Option<OutputFormat>,
        /// Per-unit weights CSV destination.
        #[arg(long)]
        weights_out: Option<PathBuf>,
    },
    /// Run a Monte Carlo study on one of the built-in scenarios.
    Simulate(SimulateArgs),
    /// Standardized mean differences of covariates before and after weighting.
    Diagnose {
        #[command(flatten)]
        data: DataArgs,
        /// Weights CSV as written by `estimate` (unit_index,weight).
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated factor column names.
    #[arg(long, value_delimiter = ',')]
    factors: Vec<String>,
    /// Comma-separated covariate column names (default: all remaining columns).
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    #[arg(long)]
    outcome: Option<String>,
    #[arg(long, value_enum)]
    coding: Option<FactorCoding>,
    /// Highest interaction order to estimate and balance.
    #[arg(long)]
    max_order: Option<usize>,
    #[arg(long, value_parser = parse_flavor)]
    flavor: Option<ModelFlavor>,
    /// Extra basis terms as covariate products, e.g. `age*age,age*bmi`.
    #[arg(long, value_delimiter = ',')]
    terms: Vec<String>,
    /// `auto` (empty cells), `none`, or combinations like `1,1,-1;1,1,1`.
    #[arg(long, allow_hyphen_values = true)]
    unobserved: Option<Unobserved>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long)]
    grad_tol: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_parser = parse_scenario)]
    scenario: ScenarioKind,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    reps: u64,
    #[arg(long, default_value_t = 2024)]
    seed: u64,
    #[arg(long, default_value = "y1", value_parser = parse_outcome)]
    outcome: Outcome,
    /// Comma-separated estimator names (default depends on the scenario).
    #[arg(long, value_delimiter = ',')]
    estimators: Vec<String>,
    /// Heteroskedastic errors with variances drawn from U[0, C].
    #[arg(long)]
    hetero_c: Option<f64>,
    /// Worker threads (0 uses every core).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Report destination; `.json` selects JSON, anything else CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_flavor(s: &str) -> Result<ModelFlavor, String> {
    match s {
        "additive" => Ok(ModelFlavor::Additive),
        "heterogeneous" | "interaction" => Ok(ModelFlavor::Heterogeneous),
        _ => Err(format!("expected additive or heterogeneous, got {s:?}")),
    }
}

fn parse_scenario(s: &str) -> Result<ScenarioKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_outcome(s: &str) -> Result<Outcome, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

impl DataArgs {
    fn resolve(self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => RunConfig::from_json_file(path)?,
            None => RunConfig::default(),
        };
        if self.data.is_some() {
            c.data_path = self.data;
        }
        if !self.factors.is_empty() {
            c.factor_columns = self.factors;
        }
        if !self.covariates.is_empty() {
            c.covariate_columns = self.covariates;
        }
        if self.outcome.is_some() {
            c.outcome_column = self.outcome;
        }
        if let Some(v) = self.coding {
            c.factor_coding = v;
        }
        if self.max_order.is_some() {
            c.max_order = self.max_order;
        }
        if self.flavor.is_some() {
            c.model_flavor = self.flavor;
        }
        if !self.terms.is_empty() {
            c.extra_terms = self.terms;
        }
        if let Some(u) = self.unobserved {
            c.unobserved_combinations = u;
        }
        if let Some(v) = self.max_iters {
            c.solver.max_iters = v;
        }
        if self.grad_tol.is_some() {
            c.solver.grad_tol = self.grad_tol;
        }
        c.solver
            .validate()
            .map_err(|e| config::input_error(e.to_string()))?;
        Ok(c)
    }
}

/// Exit status for a failure: 2 data or usage, 3 identification,
/// 4 infeasible, 5 non-convergence, 1 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<config::InputError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Domain(_) | Error::Data { .. }) => 2,
        Some(Error::Identification { .. }) => 3,
        Some(Error::Infeasible { .. }) => 4,
        Some(Error::NonConvergence { .. }) => 5,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Estimate {
            data,
            out,
            format,
            weights_out,
        } => {
            let mut config = data.resolve()?;
            if out.is_some() {
                config.output_path = out;
            }
            if format.is_some() {
                config.output_format = format;
            }
            if weights_out.is_some() {
                config.weights_path = weights_out;
            }
            commands::estimate(&config)
        }
        Command::Simulate(args) => commands::simulate(&args),
        Command::Diagnose { data, weights, out } => {
            let mut config = data.resolve()?;
            if out.is_some() {
                config.output_path = out;
            }
            commands::diagnose(&config, &weights)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
