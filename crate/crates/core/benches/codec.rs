use std::hint::black_box;

use actstore_core::bitcodec::{pack_with, unpack_with};
use actstore_core::par::Exec;
use actstore_core::quant::{qparams_from_range, Bitwidth};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 1 << 20;

fn codec(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for b in Bitwidth::PACKED {
        let q: Vec<u32> = (0..N).map(|_| rng.random_range(0..=b.max_level())).collect();
        let qp = qparams_from_range(0.0, 1.0, b);
        let buf = pack_with(Exec::Sequential, &q, &qp, 256).unwrap();
        let mut g = c.benchmark_group(format!("codec_b{}", b.bits()));
        g.throughput(Throughput::Elements(N as u64));
        for (name, exec) in [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)] {
            g.bench_function(BenchmarkId::new("pack", name), |bn| {
                bn.iter(|| pack_with(exec, black_box(&q), &qp, 256).unwrap())
            });
            g.bench_function(BenchmarkId::new("unpack", name), |bn| {
                bn.iter(|| unpack_with(exec, black_box(&buf)).unwrap())
            });
        }
        g.finish();
    }
}

criterion_group!(benches, codec);
criterion_main!(benches);
