#[path = "support/pools.rs"]
mod pools;
#[path = "../tests/common/mod.rs"]
mod common;

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use modelshift::model::{vgg, VggConfig};
use modelshift::prune::{prune_with, PruneOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_prune(c: &mut Criterion) {
    let mut group = c.benchmark_group("prune");
    group.sample_size(20);
    for width in [0.5f32, 1.0, 2.0] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dense = vgg(&VggConfig::vgg_wide(width), &mut rng).unwrap();
        let sparse = common::sparsify(&dense, false, &mut rng);
        let params = sparse.param_count();
        for (pool_name, pool) in pools::pools() {
            let batch = PruneOptions::default();
            group.bench_with_input(BenchmarkId::new(format!("batch/{pool_name}"), params), &sparse, |b, m| {
                b.iter(|| pools::run(&pool, || black_box(prune_with(m, batch).unwrap())))
            });
        }
        let per_layer = PruneOptions { sequential: true, ..PruneOptions::default() };
        group.bench_with_input(BenchmarkId::new("per-layer", params), &sparse, |b, m| {
            b.iter(|| black_box(prune_with(m, per_layer).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_prune);
criterion_main!(benches);
