//! Victim selection after a batch of importance updates: incremental
//! re-keying versus sorting every key again.
use std::hint::black_box;

use actstore_core::pagestore::{Density, DualTrees, TreeKind};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 10_000;
const CHURN: usize = 200;

fn victims(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let size: Vec<f64> = (0..N).map(|_| rng.random_range(1e3..1e6)).collect();
    let imp: Vec<f64> = (0..N).map(|_| rng.random_range(0.0..1.0)).collect();
    let batch: Vec<(usize, f64)> = (0..CHURN).map(|_| (rng.random_range(0..N), rng.random_range(0.0..1.0))).collect();

    let mut trees = DualTrees::new();
    for i in 0..N {
        trees.insert(i as u64, Density::of(imp[i], size[i]), Density::of(imp[i], 1.0)).unwrap();
    }
    let mut g = c.benchmark_group("victim_after_updates");
    g.bench_function("dual_tree", |b| {
        b.iter_batched(
            || trees.clone(),
            |mut t| {
                for &(i, v) in &batch {
                    t.rekey(i as u64, Density::of(v, size[i]), Density::of(v, 1.0)).unwrap();
                }
                black_box(t.min(TreeKind::Mem))
            },
            BatchSize::LargeInput,
        )
    });
    g.bench_function("resort", |b| {
        b.iter_batched(
            || imp.clone(),
            |mut imp| {
                for &(i, v) in &batch {
                    imp[i] = v;
                }
                let mut keys: Vec<(Density, u64)> =
                    (0..N).map(|i| (Density::of(imp[i], size[i]), i as u64)).collect();
                keys.sort_unstable();
                black_box(keys[0])
            },
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

criterion_group!(benches, victims);
criterion_main!(benches);
