use avatar_bench::toy_avatar;
use avatar_core::hash_blendshapes::{HashConfig, HashTable};
use avatar_core::{ExpressionInput, KnnMode, Vec3};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn field(c: &mut Criterion) {
    let avatar = toy_avatar(7, 5).unwrap();
    let expr = ExpressionInput::neutral(&avatar.model);
    let frame = avatar.prepare(&expr, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = avatar.model.radius;
    let points: Vec<Vec3> = (0..4096).map(|_| Vec3::from_fn(|_, _| rng.random_range(-r..r))).collect();
    let dirs = vec![Vec3::new(0.0, 0.0, -1.0); points.len()];
    let mut group = c.benchmark_group("field");
    group.sample_size(10);
    group.bench_function("prepare_frame", |b| b.iter(|| avatar.prepare(black_box(&expr), false).unwrap()));
    group.bench_function("query_4096_exact", |b| b.iter(|| avatar.query(&frame, black_box(&points), &dirs, KnnMode::Exact).unwrap()));
    group.bench_function("query_4096_hierarchical", |b| {
        b.iter(|| avatar.query(&frame, black_box(&points), &dirs, KnnMode::default()).unwrap())
    });
    let table = HashTable::random(HashConfig::default(), 0.5, 1.0, &mut rng);
    let q = Vec3::new(0.1, -0.2, 0.05);
    group.bench_function("hash_encode", |b| b.iter(|| table.encode(black_box(&q))));
    group.finish();
}

criterion_group!(benches, field);
criterion_main!(benches);
