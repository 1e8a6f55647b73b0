//! Direct primal solver for small instances, used to cross-check the dual.
//!
//! `min ‖w‖²` subject to `Bw = b`, `w ≥ 0` is a least-distance program. It is
//! solved through the classical reduction to nonnegative least squares: with
//! `G w ≥ h` collecting `Bw ≥ b`, `−Bw ≥ −b` and `w ≥ 0`, let `u ≥ 0` minimize
//! `‖Eu − f‖` for `E = [Gᵀ; hᵀ]`, `f = e_{N+1}`. A zero residual certifies
//! infeasibility; otherwise `w = −r_{1..N}/r_{N+1}`. The support of that
//! solution is then polished with an exact minimum-norm equality solve.
//! Nothing here shares code with the dual solver.

use nalgebra::{DMatrix, DVector};

use crate::balance::BalanceSystem;
use crate::error::{Error, Result};
use crate::linalg::Svd;

const ORACLE_MAX_N: usize = 200;

fn min_norm_solution(a: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let svd = Svd::new(a);
    svd.solve(rhs, 1e-12 * svd.max().max(1.0))
}

/// Lawson–Hanson nonnegative least squares: `min ‖Ex − f‖` over `x ≥ 0`.
pub fn nnls(e: &DMatrix<f64>, f: &DVector<f64>) -> DVector<f64> {
    let n = e.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let scale = e.amax().max(1.0) * f.amax().max(1.0);
    let tol = 1e-12 * scale * n as f64;
    let max_outer = 3 * n + 10;

    for _ in 0..max_outer {
        let resid = f - e * &x;
        let grad = e.tr_mul(&resid);
        let candidate = (0..n)
            .filter(|&j| !passive[j])
            .max_by(|&a, &b| grad[a].total_cmp(&grad[b]));
        let Some(t) = candidate else { break };
        if grad[t] <= tol {
            break;
        }
        passive[t] = true;

        loop {
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let sub = e.select_columns(&idx);
            let s_p = min_norm_solution(&sub, f);
            if s_p.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (k, &j) in idx.iter().enumerate() {
                    x[j] = s_p[k];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (k, &j) in idx.iter().enumerate() {
                if s_p[k] <= 0.0 {
                    let denom = x[j] - s_p[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[j] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for (k, &j) in idx.iter().enumerate() {
                x[j] += alpha * (s_p[k] - x[j]);
            }
            for j in 0..n {
                if passive[j] && x[j] <= tol {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    x
}

fn is_solution(lhs: &DMatrix<f64>, target: &DVector<f64>, w: &DVector<f64>) -> bool {
    let tol = 1e-9 * (1.0 + target.amax());
    w.iter().all(|&v| v >= -1e-12) && (lhs * w - target).amax() <= tol
}

/// Minimum-norm nonnegative solution of `Bw = b`, or [`Error::Infeasible`].
pub fn primal_oracle(system: &BalanceSystem) -> Result<Vec<f64>> {
    let lhs = system.lhs();
    let target = system.target();
    let (p, n) = (lhs.nrows(), lhs.ncols());
    if n > ORACLE_MAX_N {
        return Err(Error::Domain(format!(
            "the primal oracle handles at most {ORACLE_MAX_N} units, got {n}"
        )));
    }

    // Interior case: the unconstrained minimum-norm solution is already nonnegative.
    let w0 = min_norm_solution(lhs, target);
    if is_solution(lhs, target, &w0) {
        return Ok(w0.iter().map(|v| v.max(0.0)).collect());
    }

    let m = 2 * p + n;
    let mut g = DMatrix::zeros(m, n);
    let mut h = DVector::zeros(m);
    g.rows_mut(0, p).copy_from(lhs);
    g.rows_mut(p, p).copy_from(&(-lhs));
    for i in 0..n {
        g[(2 * p + i, i)] = 1.0;
    }
    h.rows_mut(0, p).copy_from(target);
    h.rows_mut(p, p).copy_from(&(-target));

    let mut e = DMatrix::zeros(n + 1, m);
    e.rows_mut(0, n).copy_from(&g.transpose());
    e.row_mut(n).copy_from(&h.transpose());
    let mut f = DVector::zeros(n + 1);
    f[n] = 1.0;

    let u = nnls(&e, &f);
    let r = &e * u - &f;
    if r.norm() < 1e-9 || r[n].abs() < 1e-14 {
        return Err(Error::Infeasible {
            max_residual: f64::NAN,
        });
    }
    let w = DVector::from_fn(n, |i, _| -r[i] / r[n]);

    // Polish: the optimum is the minimum-norm solution of the equalities
    // restricted to its support.
    let wmax = w.amax();
    let support: Vec<usize> = (0..n).filter(|&i| w[i] > 1e-7 * wmax.max(1e-300)).collect();
    if !support.is_empty() {
        let sub = lhs.select_columns(&support);
        let ws = min_norm_solution(&sub, target);
        let mut full = DVector::zeros(n);
        for (k, &i) in support.iter().enumerate() {
            full[i] = ws[k];
        }
        if is_solution(lhs, target, &full) {
            return Ok(full.iter().map(|v| v.max(0.0)).collect());
        }
    }

    let resid = (lhs * &w - target).amax();
    if resid > 1e-6 * (1.0 + target.amax()) {
        return Err(Error::Infeasible {
            max_residual: resid,
        });
    }
    Ok(w.iter().map(|v| v.max(0.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nnls_simple() {
        let e = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let f = DVector::from_column_slice(&[1.0, -1.0, 0.0]);
        let x = nnls(&e, &f);
        // second coordinate wants to be negative and is clamped
        assert!(x[1].abs() < 1e-12);
        assert!((x[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn interior_solution_is_min_norm() {
        let lhs = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let sys = BalanceSystem::from_parts(lhs, DMatrix::from_element(1, 3, 1.0)).unwrap();
        let w = primal_oracle(&sys).unwrap();
        for v in w {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn boundary_solution() {
        // w1 − w2 = 1 forces w2 to the bound only if the unconstrained answer is negative
        let lhs = DMatrix::from_row_slice(1, 2, &[1.0, -3.0]);
        let sys =
            BalanceSystem::from_parts(lhs, DMatrix::from_row_slice(1, 2, &[1.0, 0.0])).unwrap();
        let w = primal_oracle(&sys).unwrap();
        // min-norm is (0.1, −0.3); the constrained optimum is (1, 0)
        assert!((w[0] - 1.0).abs() < 1e-10 && w[1].abs() < 1e-10);
    }

    #[test]
    fn detects_infeasible() {
        let lhs = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let sys =
            BalanceSystem::from_parts(lhs, DMatrix::from_row_slice(1, 2, &[-1.0, 0.0])).unwrap();
        assert!(matches!(primal_oracle(&sys), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn beats_random_feasible_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (p, n) = (3, 30);
        let lhs = DMatrix::from_fn(p, n, |_, _| rng.random_range(-1.0..1.0));
        let w_true = DVector::from_fn(n, |_, _| rng.random_range(0.0..2.0));
        let b = &lhs * &w_true;
        let unit = DMatrix::from_fn(p, n, |r, _| b[r] / n as f64);
        let sys = BalanceSystem::from_parts(lhs.clone(), unit).unwrap();
        let w = DVector::from_vec(primal_oracle(&sys).unwrap());
        let best = w.norm_squared();
        // random feasible points: project random positive vectors onto Bw = b and keep nonnegative ones
        let pinv = Svd::new(&lhs).pseudo_inverse(1e-12);
        let mut checked = 0;
        while checked < 1000 {
            let v = DVector::from_fn(n, |_, _| rng.random_range(0.0..3.0));
            let cand = &v - &pinv * (&lhs * &v - &b);
            if cand.iter().all(|&c| c >= 0.0) {
                assert!(best <= cand.norm_squared() + 1e-9);
                checked += 1;
            }
        }
    }
}
