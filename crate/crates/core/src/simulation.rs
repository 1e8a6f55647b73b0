//! Simulated confounded factorial studies and a Monte Carlo harness that
//! compares estimators by bias, RMSE, variance ratio and CI coverage.
//!
//! Covariates are five independent standard normals; factor `k` is +1 with
//! probability `logistic(β_kᵀX)`. Each replication draws from its own ChaCha
//! stream (the replication index) under the scenario seed, so reports do not
//! depend on thread count or scheduling.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::balance::{BasisSpec, ModelFlavor, RowPlan};
use crate::data::Dataset;
use crate::design::{effect_index_set, Design, EffectIndex};
use crate::error::{Error, Result};
use crate::estimation::{ols_regression_baseline, unadjusted_baseline, Z_95};
use crate::fit::fit_with_plan;
use crate::par::{map_indexed, Parallelism};
use crate::solver::SolverOptions;

pub const COVARIATES: usize = 5;

/// Assignment coefficients `β_k`, one row per factor.
pub const BETAS: [[f64; COVARIATES]; 5] = [
    [0.25, 0.5, 0.0, 0.75, 1.0],
    [0.75, 0.25, 1.0, 0.0, 0.5],
    [1.0, 0.0, 0.75, 0.5, 0.25],
    [0.25, -0.25, 1.0, 0.75, 0.5],
    [0.0, 0.75, -0.5, 0.5, 0.25],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    ThreeFactor,
    FiveFactor,
}

impl ScenarioKind {
    pub fn factors(self) -> usize {
        match self {
            ScenarioKind::ThreeFactor => 3,
            ScenarioKind::FiveFactor => 5,
        }
    }

    pub fn default_order(self) -> usize {
        match self {
            ScenarioKind::ThreeFactor => 1,
            ScenarioKind::FiveFactor => 2,
        }
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "three-factor" => Ok(ScenarioKind::ThreeFactor),
            "five-factor" => Ok(ScenarioKind::FiveFactor),
            _ => Err(Error::Config(format!("unknown scenario {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Y1,
    Y2,
    Y3,
}

impl FromStr for Outcome {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "Y1" => Ok(Outcome::Y1),
            "Y2" => Ok(Outcome::Y2),
            "Y3" => Ok(Outcome::Y3),
            _ => Err(Error::Config(format!("unknown outcome {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub n: usize,
    pub outcome: Outcome,
    pub max_order: usize,
    /// Upper bound `C` of the per-unit error variance `v_i ~ U[0, C]`;
    /// `None` gives standard normal errors.
    pub heteroskedastic_c: Option<f64>,
    pub seed: u64,
}

impl Scenario {
    pub fn new(kind: ScenarioKind, n: usize, outcome: Outcome, seed: u64) -> Result<Self> {
        let s = Scenario {
            kind,
            n,
            outcome,
            max_order: kind.default_order(),
            heteroskedastic_c: None,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_heteroskedastic(mut self, c: f64) -> Result<Self> {
        self.heteroskedastic_c = Some(c);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 100 {
            return Err(Error::Config(format!(
                "sample size must be at least 100, got {}",
                self.n
            )));
        }
        if self.outcome == Outcome::Y3 && self.kind != ScenarioKind::ThreeFactor {
            return Err(Error::Config(
                "outcome Y3 exists only in the three-factor scenario".into(),
            ));
        }
        if self.max_order == 0 || self.max_order > self.kind.factors() {
            return Err(Error::Config(format!(
                "invalid interaction order {}",
                self.max_order
            )));
        }
        if let Some(c) = self.heteroskedastic_c {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!(
                    "heteroskedasticity bound must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }

    pub fn factors(&self) -> usize {
        self.kind.factors()
    }

    /// Effects of order up to the scenario's `K'`.
    pub fn effects(&self) -> Vec<EffectIndex> {
        effect_index_set(self.factors(), self.max_order).expect("validated scenario")
    }

    /// True value of each effect in [`Self::effects`].
    pub fn true_effects(&self) -> Vec<f64> {
        self.effects().iter().map(|e| self.true_effect(e)).collect()
    }

    pub fn true_effect(&self, effect: &EffectIndex) -> f64 {
        match effect.members() {
            [3] => 4.0,
            // 6·E[max(X4, X5)] for independent standard normals
            [2] if self.outcome == Outcome::Y3 => 6.0 / PI.sqrt(),
            [4, 5] if self.kind == ScenarioKind::FiveFactor => 2.0,
            _ => 0.0,
        }
    }

    fn mean_outcome(&self, x: &[f64], z: &[i8]) -> f64 {
        let zf = |k: usize| f64::from(z[k]);
        let base = match self.outcome {
            Outcome::Y1 => 6.0 * x[0] + 5.0 * x[1] + 4.0 * x[2] + 3.0 * x[4] + 2.0 * zf(2),
            Outcome::Y2 => {
                6.0 * x[0] + 5.0 * x[1] + 4.0 * x[2] * zf(0) + 3.0 * x[4] * zf(1) + 2.0 * zf(2)
            }
            Outcome::Y3 => {
                6.0 * x[0].sin()
                    + 5.0 * x[1]
                    + 4.0 * x[2] * zf(0)
                    + 3.0 * x[3].max(x[4]) * zf(1)
                    + 2.0 * zf(2)
            }
        };
        match self.kind {
            ScenarioKind::ThreeFactor => base,
            ScenarioKind::FiveFactor => base + zf(3) * zf(4),
        }
    }
}

fn logistic(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Draws replication `rep` of `scenario`.
pub fn generate(scenario: &Scenario, rep: u64) -> Result<Dataset> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    rng.set_stream(rep);
    let (n, k) = (scenario.n, scenario.factors());
    let mut z = Vec::with_capacity(n * k);
    let mut x = Vec::with_capacity(n * COVARIATES);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let xi: [f64; COVARIATES] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let zi: Vec<i8> = BETAS[..k]
            .iter()
            .map(|beta| {
                let p = logistic(beta.iter().zip(&xi).map(|(b, v)| b * v).sum());
                if rng.random::<f64>() < p {
                    1
                } else {
                    -1
                }
            })
            .collect();
        let sd = match scenario.heteroskedastic_c {
            Some(c) => rng.random_range(0.0..c).sqrt(),
            None => 1.0,
        };
        let eps: f64 = rng.sample(StandardNormal);
        y.push(scenario.mean_outcome(&xi, &zi) + sd * eps);
        x.extend_from_slice(&xi);
        z.extend(zi);
    }
    Dataset::new(k, COVARIATES, z, x, y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Unadjusted,
    Regression,
    WeightingAdditive,
    WeightingInteraction,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [
        Estimator::Unadjusted,
        Estimator::Regression,
        Estimator::WeightingAdditive,
        Estimator::WeightingInteraction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Unadjusted => "unadjusted",
            Estimator::Regression => "regression",
            Estimator::WeightingAdditive => "weighting_additive",
            Estimator::WeightingInteraction => "weighting_interaction",
        }
    }

    fn flavor(self) -> Option<ModelFlavor> {
        match self {
            Estimator::WeightingAdditive => Some(ModelFlavor::Additive),
            Estimator::WeightingInteraction => Some(ModelFlavor::Heterogeneous),
            _ => None,
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "unadjusted" => Ok(Estimator::Unadjusted),
            "regression" => Ok(Estimator::Regression),
            "weighting_additive" | "additive" => Ok(Estimator::WeightingAdditive),
            "weighting_interaction" | "interaction" => Ok(Estimator::WeightingInteraction),
            _ => Err(Error::Config(format!("unknown estimator {s:?}"))),
        }
    }
}

/// One effect's estimate from one replication.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub tau_hat: f64,
    /// Sandwich variance `σ̂²` (weighting estimators only).
    pub sigma2_hat: Option<f64>,
}

/// All estimators' results on one replication; `Err` holds the failure message.
#[derive(Clone, Debug, PartialEq)]
pub struct ReplicationRecord {
    pub rep: u64,
    pub results: Vec<std::result::Result<Vec<Draw>, String>>,
}

/// Shared per-study state: the weighting row plans are built once.
struct Harness {
    scenario: Scenario,
    estimators: Vec<Estimator>,
    effects: Vec<EffectIndex>,
    plans: Vec<Option<Arc<RowPlan>>>,
    solver: SolverOptions,
}

impl Harness {
    fn new(scenario: &Scenario, estimators: &[Estimator]) -> Result<Self> {
        scenario.validate()?;
        if estimators.is_empty() {
            return Err(Error::Config("no estimators requested".into()));
        }
        let design = Design::full(scenario.factors())?;
        let plans = estimators
            .iter()
            .map(|e| {
                e.flavor()
                    .map(|flavor| {
                        let spec = BasisSpec::identity(COVARIATES, flavor, scenario.max_order)?;
                        Ok(Arc::new(RowPlan::new(&spec, &design, true)?))
                    })
                    .transpose()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Harness {
            scenario: scenario.clone(),
            estimators: estimators.to_vec(),
            effects: scenario.effects(),
            plans,
            solver: SolverOptions::default(),
        })
    }

    fn run_one(&self, data: &Dataset, which: usize) -> Result<Vec<Draw>> {
        let plain = |v: Vec<f64>| {
            v.into_iter()
                .map(|tau_hat| Draw {
                    tau_hat,
                    sigma2_hat: None,
                })
                .collect()
        };
        match self.estimators[which] {
            Estimator::Unadjusted => Ok(plain(
                self.effects
                    .iter()
                    .map(|e| unadjusted_baseline(data, e))
                    .collect::<Result<_>>()?,
            )),
            Estimator::Regression => Ok(plain(ols_regression_baseline(data, &self.effects)?)),
            Estimator::WeightingAdditive | Estimator::WeightingInteraction => {
                let plan = self.plans[which]
                    .as_ref()
                    .expect("weighting estimators have plans");
                let fit = fit_with_plan(data, plan, &self.solver)?;
                Ok(fit
                    .estimate_all(data)?
                    .into_iter()
                    .map(|e| Draw {
                        tau_hat: e.tau_hat,
                        sigma2_hat: Some(e.sigma2_hat),
                    })
                    .collect())
            }
        }
    }

    fn replicate(&self, rep: u64) -> ReplicationRecord {
        let results = match generate(&self.scenario, rep) {
            Ok(data) => (0..self.estimators.len())
                .map(|j| self.run_one(&data, j).map_err(|e| e.to_string()))
                .collect(),
            Err(e) => vec![Err(e.to_string()); self.estimators.len()],
        };
        ReplicationRecord { rep, results }
    }
}

/// Runs replications `0..reps` and returns the raw per-replication results.
pub fn run_replications(
    scenario: &Scenario,
    reps: usize,
    estimators: &[Estimator],
    parallelism: Parallelism,
) -> Result<Vec<ReplicationRecord>> {
    if reps == 0 {
        return Err(Error::Config("at least one replication is required".into()));
    }
    let harness = Harness::new(scenario, estimators)?;
    Ok(map_indexed(reps, parallelism, |r| {
        harness.replicate(r as u64)
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub estimator: Estimator,
    pub effect: EffectIndex,
    pub truth: f64,
    pub bias: f64,
    pub rmse: f64,
    /// `N` times the sample variance of the estimates across replications.
    pub sim_var: Option<f64>,
    /// Mean sandwich variance `σ̂²`.
    pub cons_var: Option<f64>,
    pub var_ratio: Option<f64>,
    pub coverage: Option<f64>,
    /// Replications in which this estimator failed (excluded from the row).
    pub failures: usize,
    pub successes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub scenario: Scenario,
    pub reps: usize,
    pub rows: Vec<ReportRow>,
    pub wall_time_secs: f64,
}

impl StudyReport {
    pub fn row(&self, estimator: Estimator, effect: &EffectIndex) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && &r.effect == effect)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Study(e.to_string());
        w.write_record([
            "estimator",
            "effect",
            "bias",
            "rmse",
            "sim_var",
            "cons_var",
            "var_ratio",
            "coverage",
            "failures",
        ])
        .map_err(io)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.estimator.name().to_string(),
                r.effect.to_string(),
                r.bias.to_string(),
                r.rmse.to_string(),
                opt(r.sim_var),
                opt(r.cons_var),
                opt(r.var_ratio),
                opt(r.coverage),
                r.failures.to_string(),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::Study(e.to_string()))
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Study(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Study(e.to_string()))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Aggregates replication records into per-(estimator, effect) summaries.
/// Failed replications are excluded and counted.
pub fn aggregate(
    scenario: &Scenario,
    estimators: &[Estimator],
    records: &[ReplicationRecord],
) -> Result<StudyReport> {
    let effects = scenario.effects();
    let truth = scenario.true_effects();
    let n = scenario.n as f64;
    let mut rows = Vec::new();
    for (j, &est) in estimators.iter().enumerate() {
        let ok: Vec<&Vec<Draw>> = records
            .iter()
            .filter_map(|r| r.results[j].as_ref().ok())
            .collect();
        let failures = records.len() - ok.len();
        if ok.is_empty() {
            let why = records
                .iter()
                .find_map(|r| r.results[j].as_ref().err())
                .cloned()
                .unwrap_or_default();
            return Err(Error::Study(format!(
                "every replication failed for {est}: {why}"
            )));
        }
        for (e, effect) in effects.iter().enumerate() {
            let taus: Vec<f64> = ok.iter().map(|d| d[e].tau_hat).collect();
            let r = taus.len();
            let bias = mean(&taus) - truth[e];
            let rmse = mean(
                &taus
                    .iter()
                    .map(|t| (t - truth[e]).powi(2))
                    .collect::<Vec<_>>(),
            )
            .sqrt();
            let sim_var = (r > 1).then(|| {
                let m = mean(&taus);
                n * taus.iter().map(|t| (t - m).powi(2)).sum::<f64>() / (r - 1) as f64
            });
            let sigmas: Option<Vec<f64>> = ok.iter().map(|d| d[e].sigma2_hat).collect();
            let (cons_var, coverage) = match sigmas {
                Some(s) => {
                    let hits = taus
                        .iter()
                        .zip(&s)
                        .filter(|(t, s2)| ((*t - truth[e]).abs()) <= Z_95 * (*s2 / n).sqrt())
                        .count();
                    (Some(mean(&s)), Some(hits as f64 / r as f64))
                }
                None => (None, None),
            };
            let var_ratio = match (cons_var, sim_var) {
                (Some(c), Some(s)) if s > 0.0 => Some(c / s),
                _ => None,
            };
            rows.push(ReportRow {
                estimator: est,
                effect: effect.clone(),
                truth: truth[e],
                bias,
                rmse,
                sim_var,
                cons_var,
                var_ratio,
                coverage,
                failures,
                successes: r,
            });
        }
    }
    Ok(StudyReport {
        scenario: scenario.clone(),
        reps: records.len(),
        rows,
        wall_time_secs: 0.0,
    })
}

/// Generates, fits and aggregates `reps` replications.
pub fn run_study(
    scenario: &Scenario,
    reps: usize,
    estimators: &[Estimator],
    parallelism: Parallelism,
) -> Result<StudyReport> {
    let start = Instant::now();
    let records = run_replications(scenario, reps, estimators, parallelism)?;
    let mut report = aggregate(scenario, estimators, &records)?;
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{contrast_vector, enumerate_combinations};

    #[test]
    fn beta_listing() {
        assert_eq!(BETAS[0], [0.25, 0.5, 0.0, 0.75, 1.0]);
        assert_eq!(logistic(0.0), 0.5);
    }

    #[test]
    fn three_factor_truth_by_cell_enumeration() {
        // Outcome means differ across cells only through the Z terms; average
        // over X analytically (E[X]=0, E[sin X1]=0) and apply each contrast.
        for outcome in [Outcome::Y1, Outcome::Y2] {
            let s = Scenario::new(ScenarioKind::ThreeFactor, 100, outcome, 0).unwrap();
            let cells = enumerate_combinations(3).unwrap();
            let x0 = [0.0; COVARIATES];
            let means: Vec<f64> = cells
                .iter()
                .map(|c| s.mean_outcome(&x0, c.levels()))
                .collect();
            for (e, effect) in s.effects().iter().enumerate() {
                let g = contrast_vector(effect, 3).unwrap().as_f64();
                let tau: f64 = g.iter().zip(&means).map(|(a, b)| a * b).sum::<f64>() / 4.0;
                assert!((tau - s.true_effects()[e]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generation_is_reproducible_and_stream_separated() {
        let s = Scenario::new(ScenarioKind::ThreeFactor, 200, Outcome::Y1, 9).unwrap();
        assert_eq!(generate(&s, 3).unwrap(), generate(&s, 3).unwrap());
        assert_ne!(generate(&s, 3).unwrap(), generate(&s, 4).unwrap());
    }

    #[test]
    fn scenario_validation() {
        assert!(Scenario::new(ScenarioKind::FiveFactor, 500, Outcome::Y3, 0).is_err());
        assert!(Scenario::new(ScenarioKind::ThreeFactor, 50, Outcome::Y1, 0).is_err());
        let s = Scenario::new(ScenarioKind::ThreeFactor, 100, Outcome::Y1, 0).unwrap();
        assert!(s.with_heteroskedastic(-1.0).is_err());
    }

    #[test]
    fn single_replication_aggregate() {
        let s = Scenario::new(ScenarioKind::ThreeFactor, 300, Outcome::Y1, 5).unwrap();
        let ests = [Estimator::Unadjusted, Estimator::WeightingInteraction];
        let records = run_replications(&s, 1, &ests, Parallelism::Sequential).unwrap();
        let report = aggregate(&s, &ests, &records).unwrap();
        for row in &report.rows {
            assert!(row.sim_var.is_none());
            assert!(row.var_ratio.is_none());
        }
        let draws = records[0].results[1].as_ref().unwrap();
        let row = report
            .row(Estimator::WeightingInteraction, &EffectIndex::main(3))
            .unwrap();
        assert_eq!(row.bias, draws[2].tau_hat - 4.0);
    }

    #[test]
    fn zero_reps_rejected() {
        let s = Scenario::new(ScenarioKind::ThreeFactor, 100, Outcome::Y1, 0).unwrap();
        assert!(run_replications(&s, 0, &Estimator::ALL, Parallelism::Sequential).is_err());
    }

    #[test]
    fn parsing() {
        assert_eq!(
            "three-factor".parse::<ScenarioKind>().unwrap(),
            ScenarioKind::ThreeFactor
        );
        assert_eq!(
            "weighting-interaction".parse::<Estimator>().unwrap(),
            Estimator::WeightingInteraction
        );
        assert!("nope".parse::<Estimator>().is_err());
    }
}
