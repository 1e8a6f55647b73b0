//! End-to-end fitting: assemble the balance system, solve for weights and
//! estimate every targeted effect with its sandwich variance.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::balance::{balance_residuals, BalanceSystem, BasisSpec, ResidualReport, RowPlan};
use crate::data::Dataset;
use crate::design::{Design, EffectIndex};
use crate::error::Result;
use crate::estimation::{estimate_effect, EffectEstimate, SandwichVariance};
use crate::solver::{solve_dual, DualSolution, SolverOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub solver: SolverOptions,
    /// Drop balance rows implied by earlier rows before solving. The feasible
    /// set is unchanged; the bread matrix of the sandwich needs it because the
    /// refined rows are linearly dependent whenever the interactions overlap.
    pub reduce_rows: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            solver: SolverOptions::default(),
            reduce_rows: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Fit {
    pub system: BalanceSystem,
    pub solution: DualSolution,
}

/// Fits balancing weights; infeasible or non-converged solves are errors.
pub fn fit(data: &Dataset, spec: &BasisSpec, design: &Design, options: &FitOptions) -> Result<Fit> {
    let plan = Arc::new(RowPlan::new(spec, design, options.reduce_rows)?);
    fit_with_plan(data, &plan, &options.solver)
}

/// Fits against a prebuilt row plan, e.g. one shared across replications.
pub fn fit_with_plan(data: &Dataset, plan: &Arc<RowPlan>, solver: &SolverOptions) -> Result<Fit> {
    let system = plan.assemble(data)?;
    let solution = solve_dual(&system, solver)?.into_result()?;
    Ok(Fit { system, solution })
}

impl Fit {
    pub fn weights(&self) -> &[f64] {
        &self.solution.weights
    }

    pub fn effects(&self) -> &[EffectIndex] {
        self.system.plan().effects()
    }

    pub fn residuals(&self) -> ResidualReport {
        balance_residuals(&self.solution.weights, &self.system)
            .expect("weights come from the same system")
    }

    pub fn sandwich(&self) -> Result<SandwichVariance> {
        SandwichVariance::new(&self.system, &self.solution.lambda)
    }

    pub fn point_estimate(&self, data: &Dataset, effect: &EffectIndex) -> Result<f64> {
        estimate_effect(data, self.weights(), effect, &self.system)
    }

    pub fn estimate(&self, data: &Dataset, effect: &EffectIndex) -> Result<EffectEstimate> {
        let sandwich = self.sandwich()?;
        self.estimate_with(data, effect, &sandwich)
    }

    fn estimate_with(
        &self,
        data: &Dataset,
        effect: &EffectIndex,
        sandwich: &SandwichVariance,
    ) -> Result<EffectEstimate> {
        let tau = self.point_estimate(data, effect)?;
        let sigma2 = sandwich.variance(data, &self.system, self.weights(), effect)?;
        Ok(EffectEstimate::new(effect.clone(), tau, sigma2, data.n()))
    }

    /// Estimates for every effect in `[K]_{K'}`, sharing one bread factorization.
    pub fn estimate_all(&self, data: &Dataset) -> Result<Vec<EffectEstimate>> {
        let sandwich = self.sandwich()?;
        self.effects()
            .iter()
            .map(|e| self.estimate_with(data, e, &sandwich))
            .collect()
    }
}
