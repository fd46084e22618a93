use chorus_core::parallel::Exec;
use chorus_core::shiftlab::{generate_dataset_with, mmd_with, MmdKind, SyntheticSpec};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench_mmd(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut cloud = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).collect() };
    let (x, y) = (cloud(400), cloud(400));
    let xr: Vec<&[f64]> = x.iter().map(Vec::as_slice).collect();
    let yr: Vec<&[f64]> = y.iter().map(Vec::as_slice).collect();
    let mut group = c.benchmark_group("mmd_400x400");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| mmd_with(exec, black_box(&xr), black_box(&yr), 1.0, MmdKind::Unbiased).unwrap())
        });
    }
    group.finish();
}

fn bench_generate(c: &mut Criterion) {
    let mut spec = SyntheticSpec::default_imu_like(2);
    spec.samples_per_cell = 40;
    let mut group = c.benchmark_group("generate_dataset");
    group.sample_size(20);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_dataset_with(black_box(&spec), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_mmd, bench_generate);
criterion_main!(benches);
