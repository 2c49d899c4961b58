use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use mlmi::synthetic::{Amputation, Mechanism};
use mlmi::{
    ampute, fit_lmm, generate_two_level, pool_estimates, run_imputation, AnalysisModel, Dataset,
    Estimates, ImputationSpec, Method, TwoLevelSpec,
};
use nalgebra::DMatrix;

fn slope_data(j: usize, n: usize) -> Dataset {
    let spec = TwoLevelSpec {
        n_groups: j,
        group_size: n,
        group_name: "group".into(),
        responses: vec!["y".into()],
        covariates: vec!["x".into()],
        covariate_icc: 0.2,
        random_slopes: vec!["x".into()],
        beta: DMatrix::from_column_slice(2, 1, &[1.0, 0.5]),
        psi: DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.3]),
        sigma: DMatrix::from_element(1, 1, 1.0),
        seed: 1,
    };
    let (d, _) = generate_two_level(&spec).unwrap();
    ampute(
        &d,
        &Amputation {
            mechanism: Mechanism::Mcar,
            rates: vec![("y".into(), 0.2)],
            seed: 2,
        },
    )
    .unwrap()
}

fn gibbs(c: &mut Criterion) {
    let d = slope_data(100, 20);
    let mut g = c.benchmark_group("gibbs");
    g.sample_size(10);
    g.bench_function("100 scans, J=100 n=20, random slope", |b| {
        let spec = ImputationSpec::new("y ~ 1 + x + (1 + x|group)", 90, 10, 1, 3);
        b.iter(|| run_imputation(black_box(&spec), &d).unwrap())
    });
    g.finish();
}

fn lmm(c: &mut Criterion) {
    let d = slope_data(100, 20);
    let res = run_imputation(&ImputationSpec::new("y ~ 1 + x + (1 + x|group)", 100, 10, 1, 3), &d).unwrap();
    let complete = &res.imputations[0];
    let mut g = c.benchmark_group("lmm");
    for (label, formula) in [("intercept", "y ~ 1 + x + (1|group)"), ("slope", "y ~ 1 + x + (1 + x|group)")] {
        let model = AnalysisModel::parse(formula, Method::Reml).unwrap();
        g.bench_function(format!("REML {label}, N=2000"), |b| {
            b.iter(|| fit_lmm(black_box(&model), complete).unwrap())
        });
    }
    g.finish();
}

fn pooling(c: &mut Criterion) {
    let sets: Vec<Estimates> = (0..100)
        .map(|l| {
            let v: Vec<f64> = (0..5).map(|k| (l * 7 + k) as f64 * 0.01).collect();
            Estimates::new(
                (0..5).map(|k| format!("b{k}")).collect(),
                v,
                DMatrix::identity(5, 5) * 0.04,
            )
            .unwrap()
        })
        .collect();
    c.bench_function("pool 5 estimates over m=100", |b| {
        b.iter_batched(|| sets.clone(), |s| pool_estimates(&s, false).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, gibbs, lmm, pooling);
criterion_main!(benches);
