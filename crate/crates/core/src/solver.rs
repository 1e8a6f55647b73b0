//! Minimum-norm nonnegative weights through the unconstrained concave dual.
//!
//! For `min Σ w_i²` subject to `w ≥ 0`, `Bw = b`, the dual is
//! `L(λ) = Σ_i [ −¼ (λᵀB_i)² 1[λᵀB_i < 0] − λᵀb_i ]`, whose gradient is
//! `Bw(λ) − b` with `w_i(λ) = max(0, −λᵀB_i)/2`. `L` is concave and piecewise
//! quadratic, so a semismooth Newton iteration with backtracking converges
//! quickly when the primal is feasible and drives `‖λ‖` to infinity when it is
//! not.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::balance::{balance_residuals, BalanceSystem};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Gradient max-norm threshold; `None` means `1e-9·N`.
    pub grad_tol: Option<f64>,
    pub max_iters: usize,
    pub shrink: f64,
    /// Sufficient-increase constant of the Armijo test.
    pub armijo: f64,
    pub max_backtracks: usize,
    /// `‖λ‖` beyond which the primal is declared infeasible.
    pub divergence_norm: f64,
    /// Ridge on the generalized Hessian as a multiple of `trace(½BBᵀ)/P`.
    pub ridge_scale: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            grad_tol: None,
            max_iters: 500,
            shrink: 0.5,
            armijo: 1e-4,
            max_backtracks: 60,
            divergence_norm: 1e8,
            ridge_scale: 1e-10,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.shrink,
            self.armijo,
            self.divergence_norm,
            self.ridge_scale,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || self.shrink >= 1.0
            || self.armijo >= 0.5
            || self.max_iters == 0
            || self.grad_tol.is_some_and(|t| !(t.is_finite() && t > 0.0))
        {
            return Err(Error::Config(format!("invalid solver options {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Converged,
    Infeasible,
    MaxIters,
}

#[derive(Clone, Debug)]
pub struct DualSolution {
    pub lambda: Vec<f64>,
    /// `γ_i = λᵀB_i·1[λᵀB_i ≥ 0]`.
    pub gamma: Vec<f64>,
    pub weights: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub status: SolverStatus,
    /// Dual objective after each accepted step, starting from `L(0) = 0`.
    pub objective_trace: Vec<f64>,
    /// Max-norm of `Bw − b` at the returned iterate.
    pub max_residual: f64,
}

impl DualSolution {
    /// Converts a non-converged status into the matching error.
    pub fn into_result(self) -> Result<Self> {
        match self.status {
            SolverStatus::Converged => Ok(self),
            SolverStatus::Infeasible => Err(Error::Infeasible {
                max_residual: self.max_residual,
            }),
            SolverStatus::MaxIters => Err(Error::NonConvergence {
                iterations: self.iterations,
                grad_norm: self.max_residual,
            }),
        }
    }
}

fn scores(lambda: &DVector<f64>, lhs: &DMatrix<f64>) -> DVector<f64> {
    lhs.tr_mul(lambda)
}

fn objective_from(u: &DVector<f64>, lambda: &DVector<f64>, target: &DVector<f64>) -> f64 {
    let quad: f64 = u.iter().filter(|&&v| v < 0.0).map(|v| v * v).sum();
    -0.25 * quad - lambda.dot(target)
}

pub fn dual_objective(lambda: &[f64], system: &BalanceSystem) -> Result<f64> {
    if lambda.len() != system.p() {
        return Err(Error::Domain(format!(
            "lambda has length {}, system has {} rows",
            lambda.len(),
            system.p()
        )));
    }
    let lambda = DVector::from_column_slice(lambda);
    let u = scores(&lambda, system.lhs());
    Ok(objective_from(&u, &lambda, system.target()))
}

fn weights_from(u: &DVector<f64>) -> DVector<f64> {
    u.map(|v| (-v).max(0.0) / 2.0)
}

/// Maximizes the dual by semismooth Newton with backtracking line search,
/// falling back to gradient ascent when the Newton direction fails.
pub fn solve_dual(system: &BalanceSystem, options: &SolverOptions) -> Result<DualSolution> {
    options.validate()?;
    let (p, n) = (system.p(), system.n());
    if p == 0 || n == 0 {
        return Err(Error::Domain("empty balance system".into()));
    }
    let lhs = system.lhs();
    let target = system.target();
    let grad_tol = options.grad_tol.unwrap_or(1e-9 * n as f64);

    let trace: f64 = 0.5 * lhs.iter().map(|v| v * v).sum::<f64>();
    let base_ridge = if trace > 0.0 {
        options.ridge_scale * trace / p as f64
    } else {
        options.ridge_scale
    };

    let mut lambda = DVector::zeros(p);
    let mut u = DVector::zeros(n);
    let mut obj = 0.0;
    let mut status = SolverStatus::MaxIters;
    let mut iterations = 0;
    let mut objective_trace = vec![0.0];

    for iter in 0..options.max_iters {
        let w = weights_from(&u);
        let grad = lhs * &w - target;
        if grad.amax() <= grad_tol {
            status = SolverStatus::Converged;
            break;
        }
        iterations = iter + 1;

        // At λ = 0 every unit sits on the kink; take the all-active element
        // of the generalized Hessian there so the first step is informative.
        let active: Vec<usize> = if iter == 0 && u.iter().all(|&v| v == 0.0) {
            (0..n).collect()
        } else {
            (0..n).filter(|&i| u[i] < 0.0).collect()
        };
        let direction = newton_direction(lhs, &active, &grad, base_ridge);

        let mut accepted = None;
        if let Some(d) = direction {
            accepted = line_search(lhs, target, &lambda, obj, &grad, &d, options);
        }
        if accepted.is_none() {
            // Gradient ascent, first step scaled by the curvature along `grad`.
            let curvature = {
                let bg = lhs.tr_mul(&grad);
                0.5 * active.iter().map(|&i| bg[i] * bg[i]).sum::<f64>()
            };
            let step = if curvature > 0.0 {
                grad.norm_squared() / curvature
            } else {
                1.0 / base_ridge.max(f64::MIN_POSITIVE)
            };
            accepted = line_search(lhs, target, &lambda, obj, &grad, &(&grad * step), options);
        }
        match accepted {
            Some((new_lambda, new_u, new_obj)) => {
                lambda = new_lambda;
                u = new_u;
                obj = new_obj;
                objective_trace.push(obj);
            }
            None => break,
        }
        if lambda.norm() > options.divergence_norm {
            status = SolverStatus::Infeasible;
            break;
        }
    }

    let weights = weights_from(&u);
    let gamma: Vec<f64> = u.iter().map(|&v| if v >= 0.0 { v } else { 0.0 }).collect();
    let weights: Vec<f64> = weights.iter().copied().collect();
    let max_residual = balance_residuals(&weights, system)?.max_abs;
    if status == SolverStatus::MaxIters && max_residual <= grad_tol {
        status = SolverStatus::Converged;
    }
    Ok(DualSolution {
        lambda: lambda.iter().copied().collect(),
        gamma,
        weights,
        objective: obj,
        iterations,
        status,
        objective_trace,
        max_residual,
    })
}

/// Solves `(½ B_A B_Aᵀ + ridge·I) d = g`, raising the ridge if the Cholesky
/// factorization fails.
fn newton_direction(
    lhs: &DMatrix<f64>,
    active: &[usize],
    grad: &DVector<f64>,
    base_ridge: f64,
) -> Option<DVector<f64>> {
    let p = lhs.nrows();
    let hess = if active.is_empty() {
        DMatrix::zeros(p, p)
    } else {
        let sub = lhs.select_columns(active);
        &sub * sub.transpose() * 0.5
    };
    let mut ridge = base_ridge;
    for _ in 0..8 {
        let mut h = hess.clone();
        for j in 0..p {
            h[(j, j)] += ridge;
        }
        if let Some(chol) = h.cholesky() {
            let d = chol.solve(grad);
            if d.iter().all(|v| v.is_finite()) {
                return Some(d);
            }
        }
        ridge *= 10.0;
    }
    None
}

type Step = (DVector<f64>, DVector<f64>, f64);

fn line_search(
    lhs: &DMatrix<f64>,
    target: &DVector<f64>,
    lambda: &DVector<f64>,
    obj: f64,
    grad: &DVector<f64>,
    direction: &DVector<f64>,
    options: &SolverOptions,
) -> Option<Step> {
    let slope = grad.dot(direction);
    if slope.is_nan() || slope <= 0.0 {
        return None;
    }
    // Below this size objective differences are rounding noise; steps are
    // then judged by the gradient (the primal residual) instead.
    let noise = 64.0 * f64::EPSILON * (1.0 + obj.abs());
    let grad_norm = grad.amax();
    let mut t = 1.0;
    for _ in 0..=options.max_backtracks {
        let cand = lambda + direction * t;
        let u = scores(&cand, lhs);
        let val = objective_from(&u, &cand, target);
        if val.is_finite() {
            let required = options.armijo * t * slope;
            if required > noise {
                if val >= obj + required {
                    return Some((cand, u, val));
                }
            } else if val >= obj - noise {
                let new_grad = lhs * weights_from(&u) - target;
                if new_grad.amax() < grad_norm {
                    return Some((cand, u, val));
                }
            }
        }
        t *= options.shrink;
    }
    None
}
