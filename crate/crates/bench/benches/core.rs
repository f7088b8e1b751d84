use std::hint::black_box;

use cknn_bench::{fh_inputs, scenario_frame};
use cknn_core::tuning::assign_folds;
use cknn_core::{
    calibrate, calibration_weights, cv_objective, fit_fh, fixed_k_bootstrap, hasd_distance, pseudo_values,
    search_neighbors, FeatureMask, FhOptions,
};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn hasd(c: &mut Criterion) {
    let mask = FeatureMask::all(4).unwrap();
    let x = [3.0, -1.0, 2.0, 1.0];
    let y = [5.0, 4.0, -2.0, 1.0];
    c.bench_function("hasd_distance/p4", |b| {
        b.iter(|| hasd_distance(black_box(&x), black_box(&y), &mask).unwrap())
    });
}

fn neighbours(c: &mut Criterion) {
    let mut group = c.benchmark_group("search_neighbors");
    group.sample_size(10);
    let mask = FeatureMask::all(4).unwrap();
    for n in [20_000, 100_000] {
        let frame = scenario_frame(n, n / 100, 1);
        group.bench_with_input(BenchmarkId::from_parameter(n), &frame, |b, frame| {
            b.iter(|| search_neighbors(frame, 10, &mask).unwrap())
        });
    }
    group.finish();
}

fn calibration(c: &mut Criterion) {
    let totals: Vec<f64> = (0..10).map(|j| 1000.0 + 37.0 * j as f64).collect();
    c.bench_function("calibration_weights/k10", |b| {
        b.iter(|| calibration_weights(black_box(&totals), 5000.0, 2500.0, 300.0).unwrap())
    });
    let frame = scenario_frame(20_000, 200, 2);
    let table = search_neighbors(&frame, 10, &FeatureMask::all(4).unwrap()).unwrap();
    c.bench_function("calibrate/n20000_k10", |b| {
        b.iter(|| calibrate(&frame, &table).unwrap())
    });
}

fn tuning(c: &mut Criterion) {
    let frame = scenario_frame(20_000, 200, 3);
    let folds = assign_folds(frame.donors().len(), 5, 1).unwrap();
    let mask = FeatureMask::all(4).unwrap();
    c.bench_function("cv_objective/n200_k10", |b| {
        b.iter(|| cv_objective(&frame, 10, &mask, &folds).unwrap())
    });
}

fn bootstrap(c: &mut Criterion) {
    let mut group = c.benchmark_group("fixed_k_bootstrap");
    group.sample_size(10);
    let frame = scenario_frame(20_000, 200, 4);
    let table = search_neighbors(&frame, 10, &FeatureMask::all(4).unwrap()).unwrap();
    let (cal, _) = calibrate(&frame, &table).unwrap();
    let psi = pseudo_values(&frame, &table.usage, &cal.w).unwrap();
    for b in [100, 500] {
        group.bench_with_input(BenchmarkId::from_parameter(b), &b, |bench, &b| {
            bench.iter(|| fixed_k_bootstrap(&psi, b, 7).unwrap())
        });
    }
    group.finish();
}

fn reml(c: &mut Criterion) {
    let options = FhOptions::default();
    for m in [56, 200] {
        let inputs = fh_inputs(m, 5);
        c.bench_function(&format!("fit_fh/m{m}"), |b| {
            b.iter(|| fit_fh(&inputs, &options).unwrap())
        });
    }
}

criterion_group!(benches, hasd, neighbours, calibration, tuning, bootstrap, reml);
criterion_main!(benches);
