//! Sequential versus rayon execution of the simulation harness and of the
//! per-replication fitting work it fans out.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use factorial_weights::simulation::{
    generate, run_study, Estimator, Outcome, Scenario, ScenarioKind,
};
use factorial_weights::{fit, BasisSpec, Design, FitOptions, ModelFlavor, Parallelism};

fn study(c: &mut Criterion) {
    let mut group = c.benchmark_group("run_study");
    group.sample_size(10);
    let scenario = Scenario::new(ScenarioKind::ThreeFactor, 500, Outcome::Y2, 1).unwrap();
    for mode in [Parallelism::Sequential, Parallelism::Parallel] {
        group.bench_with_input(
            BenchmarkId::new(format!("{mode:?}"), 32),
            &mode,
            |b, &mode| {
                b.iter(|| run_study(black_box(&scenario), 32, &Estimator::ALL, mode).unwrap())
            },
        );
    }
    group.finish();
}

fn single_fit(c: &mut Criterion) {
    let scenario = Scenario::new(ScenarioKind::FiveFactor, 2000, Outcome::Y1, 1).unwrap();
    let data = generate(&scenario, 0).unwrap();
    let spec = BasisSpec::identity(5, ModelFlavor::Heterogeneous, 2).unwrap();
    let design = Design::full(5).unwrap();
    c.bench_function("fit_five_factor_n2000", |b| {
        b.iter(|| fit(black_box(&data), &spec, &design, &FitOptions::default()).unwrap())
    });
}

criterion_group!(benches, study, single_fit);
criterion_main!(benches);
