//! Criterion benchmarks for the hot paths: dense matmul, the k-step
//! transitional simulation, and the RBF-MMD² metric.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dad_core::dad::DadModule;
use dad_core::diffusion::VarianceSchedule;
use dad_core::metrics::{rbf_mmd2, MmdConfig};
use dad_core::models::{DomainTag, FeatureBatch, NoisePredictor};
use dad_core::numerics::rng::Rng;
use dad_core::numerics::tensor::matmul;

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [32usize, 128] {
        let mut rng = Rng::new(1);
        let a = rng.gaussian(vec![n, n]).unwrap();
        let b = rng.gaussian(vec![n, n]).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(&a, &b).unwrap());
        });
    }
    group.finish();
}

fn bench_simulate(c: &mut Criterion) {
    let mut rng = Rng::new(2);
    let predictor = NoisePredictor::new(8, 64, 3, 32, &mut rng).unwrap();
    let sched = VarianceSchedule::linear(50, 1e-4, 0.02).unwrap();
    let mut dad = DadModule::new(predictor, sched);
    dad.frozen = true;
    let feats = rng.gaussian(vec![64, 8]).unwrap();
    let labels: Vec<usize> = (0..64).map(|i| i % 2).collect();
    let batch = FeatureBatch::new(feats, Some(labels), DomainTag::Source).unwrap();
    let mut group = c.benchmark_group("simulate_transitional");
    for k in [10usize, 50] {
        group.bench_with_input(BenchmarkId::from_parameter(k), &k, |bench, &k| {
            let mut sim_rng = Rng::new(3);
            bench.iter(|| dad.simulate_transitional(&batch, k, &mut sim_rng).unwrap());
        });
    }
    group.finish();
}

fn bench_mmd(c: &mut Criterion) {
    let mut group = c.benchmark_group("rbf_mmd2");
    for n in [100usize, 500] {
        let mut rng = Rng::new(4);
        let x = rng.gaussian(vec![n, 8]).unwrap();
        let y = rng.gaussian(vec![n, 8]).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| rbf_mmd2(&x, &y, MmdConfig::default()).unwrap());
        });
    }
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_simulate, bench_mmd);
criterion_main!(benches);
