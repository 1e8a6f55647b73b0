//! Effect estimates, sandwich variances, the regression-augmented estimator,
//! baseline estimators and covariate-balance diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::balance::{membership_at, BalanceSystem};
use crate::data::Dataset;
use crate::design::{sign_at_index, Design, EffectIndex, TreatmentCombination};
use crate::error::{Error, Result};
use crate::linalg::Svd;

/// Two-sided 95% normal critical value.
pub const Z_95: f64 = 1.96;

/// Relative eigenvalue floor for the bread matrix of the sandwich.
pub const BREAD_EIGEN_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub effect: EffectIndex,
    pub tau_hat: f64,
    /// Estimated asymptotic variance of `√N(τ̂ − τ)`.
    pub sigma2_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

impl EffectEstimate {
    pub fn new(effect: EffectIndex, tau_hat: f64, sigma2_hat: f64, n: usize) -> Self {
        let half = Z_95 * (sigma2_hat / n as f64).sqrt();
        EffectEstimate {
            effect,
            tau_hat,
            sigma2_hat,
            ci_low: tau_hat - half,
            ci_high: tau_hat + half,
            n,
        }
    }

    /// Variance of `τ̂` itself, `σ̂²/N`.
    pub fn variance(&self) -> f64 {
        self.sigma2_hat / self.n as f64
    }

    pub fn std_error(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci_low <= truth && truth <= self.ci_high
    }
}

fn check_weights(data: &Dataset, weights: &[f64]) -> Result<()> {
    if weights.len() != data.n() {
        return Err(Error::Domain(format!(
            "{} weights for {} units",
            weights.len(),
            data.n()
        )));
    }
    Ok(())
}

/// `A⁺_{iK} − A⁻_{iK}` for every unit.
pub fn contrast_signs(data: &Dataset, effect: &EffectIndex, design: &Design) -> Result<Vec<f64>> {
    if data.factors() != design.factors() {
        return Err(Error::Domain(format!(
            "data has {} factors, design has {}",
            data.factors(),
            design.factors()
        )));
    }
    let memberships = side_memberships(data, effect, design)?;
    Ok(memberships.iter().map(|(p, m)| p - m).collect())
}

fn side_memberships(
    data: &Dataset,
    effect: &EffectIndex,
    design: &Design,
) -> Result<Vec<(f64, f64)>> {
    let mut cache: Vec<Option<(f64, f64)>> = vec![None; 1usize << design.factors()];
    (0..data.n())
        .map(|i| {
            let cell = data.cell(i);
            if let Some(v) = cache[cell] {
                return Ok(v);
            }
            if !design.is_observed(cell) {
                return Err(Error::Domain(format!(
                    "unit {i} has combination {}, which the design treats as unobserved",
                    TreatmentCombination::from_index(cell, design.factors())
                )));
            }
            let v = membership_at(design, effect, cell)?;
            cache[cell] = Some(v);
            Ok(v)
        })
        .collect()
}

/// `(1/N) Σ_i w_i (A⁺_{iK} − A⁻_{iK}) Y_i` without checking the effect against a system.
pub fn weighted_contrast(
    data: &Dataset,
    weights: &[f64],
    effect: &EffectIndex,
    design: &Design,
) -> Result<f64> {
    check_weights(data, weights)?;
    let signs = contrast_signs(data, effect, design)?;
    let total: f64 = signs
        .iter()
        .zip(weights)
        .zip(data.y())
        .map(|((s, w), y)| s * w * y)
        .sum();
    Ok(total / data.n() as f64)
}

fn check_effect(system: &BalanceSystem, effect: &EffectIndex) -> Result<()> {
    if effect.is_summary() || !system.plan().effects().contains(effect) {
        return Err(Error::Domain(format!(
            "effect {effect} is not among the effects the balance system targets"
        )));
    }
    Ok(())
}

/// Weighting estimator `τ̂_K` for an effect the system was built to estimate.
pub fn estimate_effect(
    data: &Dataset,
    weights: &[f64],
    effect: &EffectIndex,
    system: &BalanceSystem,
) -> Result<f64> {
    check_effect(system, effect)?;
    weighted_contrast(data, weights, effect, system.design())
}

/// Inverse of the bread matrix `M = (1/N) Σ −½ B_i B_iᵀ 1[λ̂ᵀB_i < 0]`,
/// factored once per fit and shared by all effects.
#[derive(Clone, Debug)]
pub struct SandwichVariance {
    m_inv: DMatrix<f64>,
    active: Vec<bool>,
    /// Ratio of the extreme eigenvalues of `−M`.
    pub condition: f64,
}

impl SandwichVariance {
    pub fn new(system: &BalanceSystem, lambda: &[f64]) -> Result<Self> {
        if lambda.len() != system.p() {
            return Err(Error::Domain(
                "lambda length does not match the system".into(),
            ));
        }
        let n = system.n();
        let u = system.lhs().tr_mul(&DVector::from_column_slice(lambda));
        let active: Vec<bool> = u.iter().map(|&v| v < 0.0).collect();
        let idx: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
        if idx.is_empty() {
            return Err(Error::Variance(
                "no unit receives positive weight; the bread matrix is zero".into(),
            ));
        }
        let sub = system.lhs().select_columns(&idx);
        // −M, symmetrized
        let mut neg_m = &sub * sub.transpose() * (0.5 / n as f64);
        neg_m = (&neg_m + neg_m.transpose()) * 0.5;
        let eig = neg_m.symmetric_eigen();
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if max.is_nan() || max <= 0.0 || min <= BREAD_EIGEN_TOL * max {
            return Err(Error::Variance(format!(
                "bread matrix is singular (eigenvalues in [{min:.3e}, {max:.3e}]); \
                 check the balance rows for linear dependence"
            )));
        }
        let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v));
        let m_inv = -(&eig.eigenvectors * inv_diag * eig.eigenvectors.transpose());
        Ok(SandwichVariance {
            m_inv,
            active,
            condition: max / min,
        })
    }

    /// `σ̂²_K = (1/N) Σ_i (η_iᵀL)²` for the stacked estimating equation of `(λ, τ_K)`.
    pub fn variance(
        &self,
        data: &Dataset,
        system: &BalanceSystem,
        weights: &[f64],
        effect: &EffectIndex,
    ) -> Result<f64> {
        check_weights(data, weights)?;
        let n = data.n();
        if system.n() != n || self.active.len() != n {
            return Err(Error::Domain("system and data sizes differ".into()));
        }
        let signs = contrast_signs(data, effect, system.design())?;
        let y = data.y();
        let contrib: Vec<f64> = (0..n).map(|i| weights[i] * signs[i] * y[i]).collect();
        let tau = contrib.iter().sum::<f64>() / n as f64;

        let coef = DVector::from_fn(n, |i, _| {
            if self.active[i] {
                -0.5 * signs[i] * y[i] / n as f64
            } else {
                0.0
            }
        });
        let r = system.lhs() * coef;
        let c = &self.m_inv * r;
        let bc = system.lhs().tr_mul(&c);
        let btc = system.unit_targets().tr_mul(&c);
        let sum_sq: f64 = (0..n)
            .map(|i| {
                let psi_c = weights[i] * bc[i] - btc[i];
                let eta = psi_c - (contrib[i] - tau);
                eta * eta
            })
            .sum();
        Ok(sum_sq / n as f64)
    }
}

/// Convenience wrapper building the bread matrix for a single effect.
pub fn variance_estimate(
    data: &Dataset,
    weights: &[f64],
    lambda: &[f64],
    system: &BalanceSystem,
    effect: &EffectIndex,
) -> Result<f64> {
    SandwichVariance::new(system, lambda)?.variance(data, system, weights, effect)
}

/// Least squares via SVD; fails when the design lacks full column rank.
fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let svd = Svd::new(x);
    let smax = svd.max();
    let tol = 1e-10 * smax;
    let rank = svd.rank(tol);
    if smax == 0.0 || rank < x.ncols() {
        return Err(Error::Baseline(format!(
            "regression design has rank {rank} but {} columns",
            x.ncols()
        )));
    }
    Ok(svd.solve(y, tol))
}

/// Minimum-norm least-squares coefficients of `Y` on the balanced functions
/// `q_{sJ}(X_i, Z_i)` of the system.
pub fn outcome_regression(data: &Dataset, system: &BalanceSystem) -> Result<Vec<f64>> {
    let q = q_matrix(data, system);
    if q.ncols() == 0 {
        return Ok(Vec::new());
    }
    let svd = Svd::new(&q);
    let alpha = svd.solve(&DVector::from_column_slice(data.y()), 1e-10 * svd.max());
    Ok(alpha.iter().copied().collect())
}

fn q_matrix(data: &Dataset, system: &BalanceSystem) -> DMatrix<f64> {
    let plan = system.plan();
    let k = data.factors();
    DMatrix::from_fn(data.n(), plan.terms().len(), |i, t| {
        let term = &plan.terms()[t];
        plan.bases()[term.basis].eval(data.x_row(i))
            * f64::from(sign_at_index(term.interaction.members(), data.cell(i), k))
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedEstimate {
    pub value: f64,
    /// Largest per-term gap between the weighted contrast of `q` and its design target.
    pub max_imbalance: f64,
    /// False when the imbalance exceeds `1e-8`, in which case equality with the
    /// weighting estimator is not guaranteed.
    pub balanced: bool,
}

/// Regression-augmented weighting estimator with outcome-model coefficients
/// `alpha` on the balanced functions. Under exact balance it equals
/// [`estimate_effect`] for every `alpha`.
pub fn augmented_estimate(
    data: &Dataset,
    weights: &[f64],
    system: &BalanceSystem,
    effect: &EffectIndex,
    alpha: &[f64],
) -> Result<AugmentedEstimate> {
    check_effect(system, effect)?;
    check_weights(data, weights)?;
    let plan = system.plan();
    if alpha.len() != plan.terms().len() {
        return Err(Error::Domain(format!(
            "{} coefficients for {} balanced functions",
            alpha.len(),
            plan.terms().len()
        )));
    }
    let design = system.design();
    let k = design.factors();
    let n = data.n() as f64;
    let signs = contrast_signs(data, effect, design)?;
    let q = q_matrix(data, system);
    let profile = design.contrast_profile(effect)?;
    let scale = (1u64 << (k - 1)) as f64;

    let mut max_imbalance = 0.0f64;
    let mut model_term = 0.0;
    for (t, term) in plan.terms().iter().enumerate() {
        let h_sum: f64 = (0..data.n())
            .map(|i| plan.bases()[term.basis].eval(data.x_row(i)))
            .sum();
        let g_r: f64 = (0..1usize << k)
            .map(|z| profile[z] * f64::from(sign_at_index(term.interaction.members(), z, k)))
            .sum();
        let design_part = g_r * h_sum / (scale * n);
        let weighted_part: f64 = (0..data.n())
            .map(|i| weights[i] * signs[i] * q[(i, t)])
            .sum::<f64>()
            / n;
        max_imbalance = max_imbalance.max((weighted_part - design_part).abs());
        model_term += alpha[t] * design_part;
    }
    let residual_term: f64 = (0..data.n())
        .map(|i| {
            let fitted: f64 = (0..alpha.len()).map(|t| alpha[t] * q[(i, t)]).sum();
            weights[i] * signs[i] * (data.y()[i] - fitted)
        })
        .sum::<f64>()
        / n;
    Ok(AugmentedEstimate {
        value: residual_term + model_term,
        max_imbalance,
        balanced: max_imbalance <= 1e-8,
    })
}

/// Twice the OLS coefficient of each effect's factor product in a regression
/// of `Y` on an intercept, the covariates and the listed factor products.
pub fn ols_regression_baseline(data: &Dataset, effects: &[EffectIndex]) -> Result<Vec<f64>> {
    if effects.iter().any(EffectIndex::is_summary) {
        return Err(Error::Baseline(
            "the summary contrast is not a regression term".into(),
        ));
    }
    let d = data.covariates();
    let cols = 1 + d + effects.len();
    let x = DMatrix::from_fn(data.n(), cols, |i, c| {
        if c == 0 {
            1.0
        } else if c <= d {
            data.x_row(i)[c - 1]
        } else {
            f64::from(effects[c - 1 - d].sign(data.z_row(i)))
        }
    });
    let beta = least_squares(&x, &DVector::from_column_slice(data.y()))?;
    Ok((0..effects.len()).map(|e| 2.0 * beta[1 + d + e]).collect())
}

/// Difference in mean outcome between units with `∏_{j∈K} z_j = +1` and `−1`.
pub fn unadjusted_baseline(data: &Dataset, effect: &EffectIndex) -> Result<f64> {
    if effect.is_summary() {
        return Err(Error::Baseline(
            "the summary contrast has no negative group".into(),
        ));
    }
    let (mut sp, mut np, mut sm, mut nm) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..data.n() {
        if effect.sign(data.z_row(i)) > 0 {
            sp += data.y()[i];
            np += 1;
        } else {
            sm += data.y()[i];
            nm += 1;
        }
    }
    if np == 0 || nm == 0 {
        return Err(Error::Baseline(format!(
            "effect {effect} has an empty comparison group"
        )));
    }
    Ok(sp / np as f64 - sm / nm as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmdRow {
    pub effect: EffectIndex,
    pub covariate: usize,
    pub smd_before: f64,
    pub smd_after: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SmdReport {
    pub rows: Vec<SmdRow>,
    /// `(effect, covariate)` pairs skipped because the pooled SD is zero.
    pub skipped: Vec<(EffectIndex, usize)>,
}

impl SmdReport {
    pub fn max_after(&self) -> f64 {
        self.rows.iter().fold(0.0, |m, r| m.max(r.smd_after))
    }

    pub fn max_before(&self) -> f64 {
        self.rows.iter().fold(0.0, |m, r| m.max(r.smd_before))
    }
}

fn weighted_mean(values: &[f64], w: &[f64]) -> Option<f64> {
    let total: f64 = w.iter().sum();
    (total > 0.0).then(|| values.iter().zip(w).map(|(v, a)| v * a).sum::<f64>() / total)
}

fn weighted_var(values: &[f64], w: &[f64]) -> Option<f64> {
    let mean = weighted_mean(values, w)?;
    let total: f64 = w.iter().sum();
    Some(
        values
            .iter()
            .zip(w)
            .map(|(v, a)| a * (v - mean).powi(2))
            .sum::<f64>()
            / total,
    )
}

/// Absolute standardized mean differences of each covariate between the
/// positive and negative sides of each effect, before and after weighting.
/// Sides are weighted by `A⁺`/`A⁻` (times `w_i` after weighting); the scale is
/// the unweighted pooled SD `√((s₊² + s₋²)/2)`.
pub fn smd_report(
    data: &Dataset,
    weights: &[f64],
    effects: &[EffectIndex],
    design: &Design,
) -> Result<SmdReport> {
    check_weights(data, weights)?;
    let mut report = SmdReport::default();
    for effect in effects {
        if effect.is_summary() {
            return Err(Error::Domain("SMDs need a nonempty effect".into()));
        }
        let sides = side_memberships(data, effect, design)?;
        let plus: Vec<f64> = sides.iter().map(|s| s.0).collect();
        let minus: Vec<f64> = sides.iter().map(|s| s.1).collect();
        let wplus: Vec<f64> = plus.iter().zip(weights).map(|(a, w)| a * w).collect();
        let wminus: Vec<f64> = minus.iter().zip(weights).map(|(a, w)| a * w).collect();
        for j in 0..data.covariates() {
            let x = data.covariate(j);
            let stats = (|| {
                let sd = ((weighted_var(&x, &plus)? + weighted_var(&x, &minus)?) / 2.0).sqrt();
                let before = (weighted_mean(&x, &plus)? - weighted_mean(&x, &minus)?).abs();
                let after = (weighted_mean(&x, &wplus)? - weighted_mean(&x, &wminus)?).abs();
                Some((sd, before, after))
            })();
            match stats {
                Some((sd, before, after)) if sd > 0.0 => report.rows.push(SmdRow {
                    effect: effect.clone(),
                    covariate: j,
                    smd_before: before / sd,
                    smd_after: after / sd,
                }),
                _ => report.skipped.push((effect.clone(), j)),
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::balance::{build_balance_system, BasisFunction, BasisSpec, ModelFlavor};
    use crate::design::enumerate_combinations;

    fn balanced_k2(y_from: impl Fn(&[i8]) -> f64) -> Dataset {
        let combos = enumerate_combinations(2).unwrap();
        let z: Vec<Vec<i8>> = combos.iter().map(|c| c.levels().to_vec()).collect();
        let y: Vec<f64> = z.iter().map(|zi| y_from(zi)).collect();
        Dataset::from_rows(&z, &vec![vec![0.0]; 4], &y).unwrap()
    }

    fn constant_system(data: &Dataset) -> BalanceSystem {
        let spec =
            BasisSpec::new(vec![BasisFunction::Constant], ModelFlavor::Heterogeneous, 1).unwrap();
        build_balance_system(data, &spec, &Design::full(data.factors()).unwrap()).unwrap()
    }

    #[test]
    fn point_estimates_on_balanced_design() {
        let data = balanced_k2(|z| f64::from(z[0]));
        let sys = constant_system(&data);
        let w = vec![2.0; 4];
        assert_eq!(
            estimate_effect(&data, &w, &EffectIndex::main(1), &sys).unwrap(),
            2.0
        );
        assert_eq!(
            estimate_effect(&data, &w, &EffectIndex::main(2), &sys).unwrap(),
            0.0
        );
        let two_way = EffectIndex::new([1, 2]).unwrap();
        assert!(matches!(
            estimate_effect(&data, &w, &two_way, &sys),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn zero_variation_has_zero_variance() {
        let data = balanced_k2(|_| 3.0);
        let spec =
            BasisSpec::new(vec![BasisFunction::Constant], ModelFlavor::Heterogeneous, 1).unwrap();
        let sys =
            crate::balance::build_reduced_balance_system(&data, &spec, &Design::full(2).unwrap())
                .unwrap();
        let sol = crate::solver::solve_dual(&sys, &Default::default()).unwrap();
        let v = variance_estimate(
            &data,
            &sol.weights,
            &sol.lambda,
            &sys,
            &EffectIndex::main(1),
        )
        .unwrap();
        assert!(v.abs() < 1e-18, "{v}");
    }

    #[test]
    fn ols_exact_linear_model() {
        let z: Vec<Vec<i8>> = (0..12)
            .map(|i| {
                vec![
                    if i % 2 == 0 { 1 } else { -1 },
                    if i % 3 == 0 { 1 } else { -1 },
                ]
            })
            .collect();
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![(i as f64 * 0.7).sin()]).collect();
        let y: Vec<f64> = (0..12).map(|i| x[i][0] + f64::from(z[i][0])).collect();
        let data = Dataset::from_rows(&z, &x, &y).unwrap();
        let est =
            ols_regression_baseline(&data, &[EffectIndex::main(1), EffectIndex::main(2)]).unwrap();
        assert!((est[0] - 2.0).abs() < 1e-10);
        assert!(est[1].abs() < 1e-10);
    }

    #[test]
    fn ols_rank_deficient() {
        let z = vec![vec![1, 1], vec![-1, -1], vec![1, 1], vec![-1, -1]];
        let data = Dataset::from_rows(&z, &vec![vec![0.5]; 4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let err = ols_regression_baseline(&data, &[EffectIndex::main(1), EffectIndex::main(2)]);
        assert!(matches!(err, Err(Error::Baseline(_))));
    }

    #[test]
    fn unadjusted_examples() {
        let data = balanced_k2(|_| 5.0);
        assert_eq!(
            unadjusted_baseline(&data, &EffectIndex::main(1)).unwrap(),
            0.0
        );
        let data = Dataset::from_rows(
            &[vec![-1, 1], vec![1, 1]],
            &[vec![0.0], vec![0.0]],
            &[0.0, 1.0],
        )
        .unwrap();
        assert_eq!(
            unadjusted_baseline(&data, &EffectIndex::main(1)).unwrap(),
            1.0
        );
        assert!(matches!(
            unadjusted_baseline(&data, &EffectIndex::main(2)),
            Err(Error::Baseline(_))
        ));
    }

    #[test]
    fn smd_identical_groups_and_constant_covariate() {
        let z = vec![vec![1, 1], vec![-1, 1], vec![1, -1], vec![-1, -1]];
        let x = vec![
            vec![1.0, 7.0],
            vec![1.0, 7.0],
            vec![3.0, 7.0],
            vec![3.0, 7.0],
        ];
        let data = Dataset::from_rows(&z, &x, &[0.0; 4]).unwrap();
        let rep = smd_report(
            &data,
            &[1.0; 4],
            &[EffectIndex::main(1)],
            &Design::full(2).unwrap(),
        )
        .unwrap();
        assert_eq!(rep.rows.len(), 1);
        assert_eq!(rep.rows[0].smd_before, 0.0);
        assert_eq!(rep.skipped, vec![(EffectIndex::main(1), 1)]);
    }

    #[test]
    fn smd_unit_weights_match_before() {
        let z = vec![
            vec![1, 1],
            vec![-1, 1],
            vec![1, -1],
            vec![-1, -1],
            vec![1, 1],
        ];
        let x = vec![vec![1.0], vec![2.0], vec![4.0], vec![3.0], vec![0.5]];
        let data = Dataset::from_rows(&z, &x, &[0.0; 5]).unwrap();
        let rep = smd_report(
            &data,
            &[1.0; 5],
            &[EffectIndex::main(2)],
            &Design::full(2).unwrap(),
        )
        .unwrap();
        assert_eq!(rep.rows[0].smd_before, rep.rows[0].smd_after);
        assert!(rep.rows[0].smd_before > 0.0);
    }
}
