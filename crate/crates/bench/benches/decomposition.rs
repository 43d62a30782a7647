use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skydmd::{compute_dmd, compute_pod, SnapshotMatrix};

fn snapshots(n: usize, m: usize) -> SnapshotMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data = DMatrix::from_fn(n, m, |_, _| rng.random_range(0.0..1.0));
    SnapshotMatrix::from_matrix(data, 2.0).unwrap()
}

fn dmd(c: &mut Criterion) {
    let mut group = c.benchmark_group("dmd");
    group.sample_size(10);
    for &(n, m) in &[(2_000, 100), (10_000, 100)] {
        let x = snapshots(n, m);
        group.bench_with_input(BenchmarkId::new("r3_augmented", format!("{n}x{m}")), &x, |b, x| {
            b.iter(|| compute_dmd(x, 3, 1).unwrap())
        });
    }
    group.finish();
}

fn pod(c: &mut Criterion) {
    let mut group = c.benchmark_group("pod");
    group.sample_size(10);
    let x = snapshots(19_200, 210);
    group.bench_function("120x160_210_frames", |b| b.iter(|| compute_pod(&x).unwrap()));
    group.finish();
}

criterion_group!(benches, dmd, pod);
criterion_main!(benches);
