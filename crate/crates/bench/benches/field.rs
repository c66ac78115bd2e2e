use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semap_core::geometry::SceneBounds;
use semap_core::mesh::{extract_mesh, GridSpec};
use semap_core::{FieldConfig, Point3, SceneField};

fn field() -> SceneField {
    let config = FieldConfig {
        fourier_features: 64,
        hidden: vec![128; 3],
        ..FieldConfig::default()
    };
    SceneField::new(&config, 3, 7).unwrap()
}

fn points(n: usize) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    (0..n)
        .map(|_| Point3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
        .collect()
}

fn bench_field(c: &mut Criterion) {
    let f = field();
    let pts = points(1024);
    c.bench_function("sdf_1024", |b| b.iter(|| f.eval_sdf_batch(black_box(&pts))));
    c.bench_function("sdf_grad_1024", |b| b.iter(|| f.eval_sdf_grad_batch(black_box(&pts))));
    c.bench_function("logits_1024", |b| b.iter(|| f.eval_logits_batch(black_box(&pts))));

    let grid = GridSpec::cube(SceneBounds::new(-1.0, 1.0).unwrap(), 32).unwrap();
    let mut group = c.benchmark_group("extract");
    group.sample_size(10);
    group.bench_function("mesh_32", |b| {
        b.iter(|| extract_mesh(&f, &grid))
    });
    group.finish();
}

criterion_group!(benches, bench_field);
criterion_main!(benches);
