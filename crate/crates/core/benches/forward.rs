#[path = "support/pools.rs"]
mod pools;

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use modelshift::model::{architecture, vgg, Architecture, VggConfig};
use modelshift::{forward_with, ConvAlgo, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_forward(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let models = [
        ("toy-cnn", architecture(Architecture::ToyCnn, [3, 32, 32], 8, 0).unwrap()),
        ("vgg-wide-0.5", vgg(&VggConfig::vgg_wide(0.5), &mut rng).unwrap()),
    ];
    let mut group = c.benchmark_group("forward");
    group.sample_size(20);
    for (name, model) in &models {
        for batch in [1usize, 8] {
            let x = Tensor::randn(&[batch, 3, 32, 32], 1.0, &mut rng);
            for (pool_name, pool) in pools::pools() {
                let id = BenchmarkId::new(format!("{name}/{pool_name}"), batch);
                group.bench_with_input(id, &x, |b, x| {
                    b.iter(|| pools::run(&pool, || black_box(forward_with(model, x, ConvAlgo::Im2col).unwrap())))
                });
            }
        }
    }
    group.finish();
}

criterion_group!(benches, bench_forward);
criterion_main!(benches);
