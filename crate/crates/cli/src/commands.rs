//! Subcommand bodies.

use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use anyhow::{Context, Result};
use factorial_weights::design::effect_index_set;
use factorial_weights::par::with_threads;
use factorial_weights::simulation::{run_study, Estimator, Scenario, ScenarioKind};
use factorial_weights::{
    fit, smd_report, Design, EffectEstimate, EffectIndex, FitOptions, Parallelism,
    TreatmentCombination,
};
use serde::Serialize;

use crate::config::{self, input_error, OutputFormat, RunConfig, Table};
use crate::SimulateArgs;

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn nonempty_effects(table: &Table, max_order: usize) -> Result<Vec<EffectIndex>> {
    Ok(effect_index_set(table.data.factors(), max_order)?
        .into_iter()
        .filter(|e| !e.is_summary())
        .collect())
}

fn unobserved_labels(design: &Design) -> Vec<String> {
    match design {
        Design::Incomplete(inc) => inc
            .unobserved
            .iter()
            .map(|&c| TreatmentCombination::from_index(c, inc.factors).to_string())
            .collect(),
        Design::Full { .. } => Vec::new(),
    }
}

#[derive(Serialize)]
struct EffectRow {
    effect: String,
    estimate: f64,
    std_error: f64,
    ci_low: f64,
    ci_high: f64,
    sigma2: f64,
    n: usize,
}

#[derive(Serialize)]
struct EstimateReport<'a> {
    effects: &'a [EffectRow],
    unobserved: Vec<String>,
    solver_status: String,
    iterations: usize,
    max_balance_residual: f64,
}

pub fn estimate(config: &RunConfig) -> Result<()> {
    let table = config::load_table(config, true)?;
    let spec = config::basis_spec(config, &table)?;
    let design = config::select_design(config, &table)?;
    let unobserved = unobserved_labels(&design);
    if !unobserved.is_empty() {
        eprintln!(
            "incomplete design; unobserved combinations: {}",
            unobserved.join(" ")
        );
    }
    let options = FitOptions {
        solver: config.solver.clone(),
        ..FitOptions::default()
    };
    let fitted = fit(&table.data, &spec, &design, &options)?;
    let residuals = fitted.residuals();
    eprintln!(
        "solver {:?} after {} iterations; {} balance rows, max residual {:.3e}",
        fitted.solution.status,
        fitted.solution.iterations,
        fitted.system.p(),
        residuals.max_abs
    );

    let sandwich = fitted.sandwich()?;
    let rows = nonempty_effects(&table, config.max_order())?
        .into_iter()
        .map(|effect| {
            let tau = fitted.point_estimate(&table.data, &effect)?;
            let sigma2 =
                sandwich.variance(&table.data, &fitted.system, fitted.weights(), &effect)?;
            let est = EffectEstimate::new(effect, tau, sigma2, table.data.n());
            Ok(EffectRow {
                effect: table.effect_label(&est.effect),
                estimate: est.tau_hat,
                std_error: est.std_error(),
                ci_low: est.ci_low,
                ci_high: est.ci_high,
                sigma2: est.sigma2_hat,
                n: est.n,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    if let Some(path) = &config.weights_path {
        let mut w = csv::Writer::from_writer(sink(Some(path))?);
        w.write_record(["unit_index", "weight"])?;
        for (i, weight) in fitted.weights().iter().enumerate() {
            w.write_record([i.to_string(), format!("{weight}")])?;
        }
        w.flush()?;
    }

    let format = config
        .output_format
        .unwrap_or_else(|| match &config.output_path {
            Some(p) if p.extension().is_some_and(|e| e == "json") => OutputFormat::Json,
            _ => OutputFormat::Csv,
        });
    let mut out = sink(config.output_path.as_deref())?;
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            for row in &rows {
                w.serialize(row)?;
            }
            w.flush()?;
        }
        OutputFormat::Json => {
            let report = EstimateReport {
                effects: &rows,
                unobserved,
                solver_status: format!("{:?}", fitted.solution.status),
                iterations: fitted.solution.iterations,
                max_balance_residual: residuals.max_abs,
            };
            serde_json::to_writer_pretty(&mut out, &report)?;
            writeln!(out)?;
            out.flush()?;
        }
    }
    Ok(())
}

fn read_weights(path: &Path, n: usize) -> Result<Vec<f64>> {
    let file = File::open(path).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    let mut reader = csv::Reader::from_reader(file);
    let mut weights = Vec::with_capacity(n);
    for record in reader.records() {
        let record = record.map_err(|e| input_error(format!("{}: {e}", path.display())))?;
        let line = record.position().map_or(0, |p| p.line());
        let bad = || {
            input_error(format!(
                "{}: line {line}: expected unit_index,weight",
                path.display()
            ))
        };
        let index: usize = record
            .get(0)
            .ok_or_else(bad)?
            .trim()
            .parse()
            .map_err(|_| bad())?;
        let weight: f64 = record
            .get(1)
            .ok_or_else(bad)?
            .trim()
            .parse()
            .map_err(|_| bad())?;
        if index != weights.len() {
            return Err(input_error(format!(
                "{}: line {line}: unit_index {index} out of order (expected {})",
                path.display(),
                weights.len()
            )));
        }
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(input_error(format!(
                "{}: line {line}: weight {weight} is not a finite nonnegative number",
                path.display()
            )));
        }
        weights.push(weight);
    }
    if weights.len() != n {
        return Err(input_error(format!(
            "{} has {} weights but the data has {n} rows",
            path.display(),
            weights.len()
        )));
    }
    Ok(weights)
}

pub fn diagnose(config: &RunConfig, weights_path: &Path) -> Result<()> {
    let table = config::load_table(config, false)?;
    let design = config::select_design(config, &table)?;
    let weights = read_weights(weights_path, table.data.n())?;
    let effects = nonempty_effects(&table, config.max_order())?;
    let report = smd_report(&table.data, &weights, &effects, &design)?;
    for (effect, j) in &report.skipped {
        eprintln!(
            "skipping covariate {} for effect {}: zero standard deviation",
            table.covariate_names[*j],
            table.effect_label(effect)
        );
    }
    let mut w = csv::Writer::from_writer(sink(config.output_path.as_deref())?);
    w.write_record(["effect", "covariate", "smd_before", "smd_after"])?;
    for row in &report.rows {
        w.write_record([
            table.effect_label(&row.effect),
            table.covariate_names[row.covariate].clone(),
            format!("{}", row.smd_before),
            format!("{}", row.smd_after),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn simulate(args: &SimulateArgs) -> Result<()> {
    let estimators: Vec<Estimator> = if args.estimators.is_empty() {
        match args.scenario {
            ScenarioKind::ThreeFactor => Estimator::ALL.to_vec(),
            ScenarioKind::FiveFactor => {
                vec![Estimator::Regression, Estimator::WeightingInteraction]
            }
        }
    } else {
        args.estimators
            .iter()
            .map(|s| s.parse())
            .collect::<Result<_, _>>()?
    };
    let mut scenario = Scenario::new(args.scenario, args.n, args.outcome, args.seed)?;
    if let Some(c) = args.hetero_c {
        scenario = scenario.with_heteroskedastic(c)?;
    }
    let reps = args.reps as usize;
    let report = with_threads(args.threads, || {
        run_study(&scenario, reps, &estimators, Parallelism::Parallel)
    })?;
    eprintln!(
        "{} replications in {:.2}s",
        report.reps, report.wall_time_secs
    );
    let json = args
        .out
        .as_ref()
        .is_some_and(|p| p.extension().is_some_and(|e| e == "json"));
    let mut out = sink(args.out.as_deref())?;
    if json {
        writeln!(out, "{}", report.to_json()?)?;
    } else {
        report.write_csv(&mut out)?;
    }
    out.flush()?;
    Ok(())
}
