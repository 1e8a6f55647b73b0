use factorial_weights::simulation::{
    generate, run_replications, run_study, Estimator, Outcome, Scenario, ScenarioKind,
};
use factorial_weights::{
    build_incomplete_design, fit, smd_report, BalanceSystem, BasisSpec, Dataset, Design,
    EffectIndex, FitOptions, ModelFlavor, Parallelism, TreatmentCombination,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Mean estimating function of the stacked `(λ, τ)` system at `λ`, using
/// weights recomputed from `λ` directly.
fn stacked_mean(
    system: &BalanceSystem,
    data: &Dataset,
    signs: &[f64],
    lambda: &DVector<f64>,
    tau: f64,
) -> DVector<f64> {
    let n = system.n();
    let p = system.p();
    let u = system.lhs().tr_mul(lambda);
    let w: Vec<f64> = u.iter().map(|&v| (-v).max(0.0) / 2.0).collect();
    let mut out = DVector::zeros(p + 1);
    for i in 0..n {
        for r in 0..p {
            out[r] += w[i] * system.lhs()[(r, i)] - system.unit_targets()[(r, i)];
        }
        out[p] += w[i] * signs[i] * data.y()[i] - tau;
    }
    out / n as f64
}

#[test]
fn sandwich_matches_finite_difference_jacobian() {
    let scenario = Scenario::new(ScenarioKind::ThreeFactor, 400, Outcome::Y2, 17).unwrap();
    let data = generate(&scenario, 0).unwrap();
    let spec = BasisSpec::identity(5, ModelFlavor::Heterogeneous, 2).unwrap();
    let design = Design::full(3).unwrap();
    let fitted = fit(&data, &spec, &design, &FitOptions::default()).unwrap();
    let system = &fitted.system;
    let lambda = DVector::from_column_slice(&fitted.solution.lambda);
    let p = system.p();
    let n = system.n();

    for effect in fitted.effects().iter().filter(|e| !e.is_summary()) {
        let signs = factorial_weights::estimation::contrast_signs(&data, effect, &design).unwrap();
        let tau = fitted.point_estimate(&data, effect).unwrap();
        // Jacobian of the mean estimating function in (λ, τ) by central differences.
        let mut jac = DMatrix::zeros(p + 1, p + 1);
        for c in 0..p {
            let h = 1e-7 * (1.0 + lambda[c].abs());
            let mut up = lambda.clone();
            let mut down = lambda.clone();
            up[c] += h;
            down[c] -= h;
            let d = (stacked_mean(system, &data, &signs, &up, tau)
                - stacked_mean(system, &data, &signs, &down, tau))
                / (2.0 * h);
            jac.set_column(c, &d);
        }
        jac[(p, p)] = -1.0;
        let inv = jac.try_inverse().unwrap();
        let w = fitted.weights();
        let mut sum_sq = 0.0;
        for i in 0..n {
            let mut psi = DVector::zeros(p + 1);
            for r in 0..p {
                psi[r] = w[i] * system.lhs()[(r, i)] - system.unit_targets()[(r, i)];
            }
            psi[p] = w[i] * signs[i] * data.y()[i] - tau;
            let infl = inv.row(p).dot(&psi.transpose());
            sum_sq += infl * infl;
        }
        let fd = sum_sq / n as f64;
        let analytic = fitted.estimate(&data, effect).unwrap().sigma2_hat;
        assert!(
            (fd - analytic).abs() <= 1e-4 * analytic,
            "effect {effect}: finite difference {fd} vs analytic {analytic}"
        );
    }
}

#[test]
fn confounded_draw_is_imbalanced_before_weighting() {
    let scenario = Scenario::new(ScenarioKind::ThreeFactor, 1000, Outcome::Y1, 5).unwrap();
    let data = generate(&scenario, 0).unwrap();
    let effects = scenario.effects();
    let before = smd_report(
        &data,
        &vec![1.0; data.n()],
        &effects,
        &Design::full(3).unwrap(),
    )
    .unwrap();
    assert!(before.max_before() > 0.1, "max SMD {}", before.max_before());
    let spec = BasisSpec::identity(5, ModelFlavor::Heterogeneous, 2).unwrap();
    let fitted = fit(
        &data,
        &spec,
        &Design::full(3).unwrap(),
        &FitOptions::default(),
    )
    .unwrap();
    let after = smd_report(&data, fitted.weights(), &effects, &Design::full(3).unwrap()).unwrap();
    assert!(
        after.max_after() < 1e-8,
        "max SMD after weighting {}",
        after.max_after()
    );
}

#[test]
fn adjusted_estimators_unbiased_under_linear_outcome() {
    let scenario = Scenario::new(ScenarioKind::ThreeFactor, 500, Outcome::Y1, 71).unwrap();
    let estimators = [
        Estimator::Regression,
        Estimator::WeightingAdditive,
        Estimator::WeightingInteraction,
    ];
    let report = run_study(&scenario, 1000, &estimators, Parallelism::default()).unwrap();
    for row in &report.rows {
        let r = row.successes as f64;
        let se = (row.sim_var.unwrap() / scenario.n as f64 / r).sqrt();
        assert!(
            row.bias.abs() < 3.0 * se,
            "{} {}: bias {} exceeds 3 Monte Carlo SE {}",
            row.estimator,
            row.effect,
            row.bias,
            se
        );
        // RMSE² = bias² + population variance of the draws
        let pop_var = row.sim_var.unwrap() / scenario.n as f64 * (r - 1.0) / r;
        assert!(
            (row.rmse.powi(2) - (row.bias.powi(2) + pop_var)).abs()
                < 1e-10 * (1.0 + row.rmse.powi(2))
        );
    }
}

#[test]
fn sequential_and_parallel_runs_are_identical() {
    let scenario = Scenario::new(ScenarioKind::ThreeFactor, 300, Outcome::Y2, 3).unwrap();
    let a = run_replications(&scenario, 12, &Estimator::ALL, Parallelism::Sequential).unwrap();
    let b = run_replications(&scenario, 12, &Estimator::ALL, Parallelism::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn incomplete_design_fit_end_to_end() {
    // Half fraction: the cells with z1·z2·z3 = -1 are never assigned.
    let k = 3;
    let unobserved: Vec<TreatmentCombination> = (0..8)
        .map(|i| TreatmentCombination::from_index(i, k))
        .filter(|c| c.levels().iter().map(|&v| v as i32).product::<i32>() == -1)
        .collect();
    let design = Design::Incomplete(build_incomplete_design(k, 1, &unobserved, 1e-8).unwrap());
    let observed: Vec<TreatmentCombination> = (0..8)
        .map(|i| TreatmentCombination::from_index(i, k))
        .filter(|c| !unobserved.contains(c))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 800;
    let (mut z, mut x, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let x1: f64 = rng.sample(StandardNormal);
        let x2: f64 = rng.sample(StandardNormal);
        // assignment leans on x1 so the unweighted contrast is biased
        let cell = if rng.random::<f64>() < 0.5 + 0.3 * x1.tanh() {
            rng.random_range(0..2)
        } else {
            2 + rng.random_range(0..2)
        };
        let levels = observed[cell].levels().to_vec();
        let zf: Vec<f64> = levels.iter().map(|&v| v as f64).collect();
        let noise: f64 = rng.sample(StandardNormal);
        y.push(1.0 + 2.0 * zf[0] - zf[1] + 0.5 * zf[2] + 3.0 * x1 + x2 + noise);
        z.extend(levels);
        x.extend([x1, x2]);
    }
    let data = Dataset::new(k, 2, z, x, y).unwrap();
    let spec = BasisSpec::identity(2, ModelFlavor::Additive, 1).unwrap();
    let fitted = fit(&data, &spec, &design, &FitOptions::default()).unwrap();
    let estimates = fitted.estimate_all(&data).unwrap();
    let truth = [
        (EffectIndex::main(1), 4.0),
        (EffectIndex::main(2), -2.0),
        (EffectIndex::main(3), 1.0),
    ];
    for (effect, tau) in truth {
        let est = estimates.iter().find(|e| e.effect == effect).unwrap();
        assert!(est.sigma2_hat > 0.0);
        let se = est.std_error();
        assert!(
            (est.tau_hat - tau).abs() < 4.0 * se,
            "{effect}: {} vs {tau} (se {se})",
            est.tau_hat
        );
    }
}
