//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! with its measurement and runtime against the allowed limit.
//!
//! The criteria run one at a time (a shared lock) so timing-sensitive checks
//! are not disturbed by their neighbours.

mod common;

use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Instant;

use actstore_core::bitcodec::{self, float_to_uint_bits, uint_bits_to_float};
use actstore_core::pagestore::{ActivationEntry, Density, DualTrees, ForcedAction, PageStore, TreeKind};
use actstore_core::policy::{Action, Ladder, Policy, PolicyConfig};
use actstore_core::quant::{Bitwidth, ImportanceMetric, QuantParams};
use actstore_core::reduce::{reduce, reduce_sequential, reduce_with_schedule, ReduceConfig, ReduceOp, Strategy};
use actstore_core::refnet::{self, backward, forward, forward_plain, DenseLayer, Matrix, StoreCtx, TrainConfig};
use actstore_core::trace::{self, synth, ReplayConfig, TraceEvent};
use actstore_core::Error;
use common::{reference_pack, ShadowError, ShadowKind, ShadowStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

static SERIAL: Mutex<()> = Mutex::new(());

/// Runs one criterion and prints its verdict. Writes straight to stdout so
/// the line shows up even when the harness captures test output.
fn criterion(n: u32, name: &str, limit_s: f64, f: impl FnOnce() -> Result<String, String>) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let outcome = f();
    let secs = start.elapsed().as_secs_f64();
    let outcome = outcome.and_then(|detail| {
        if secs <= limit_s {
            Ok(detail)
        } else {
            Err(format!("{detail}; over the time limit"))
        }
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d.clone()),
        Err(e) => ("FAIL", e.clone()),
    };
    let line = format!("[{tag}] criterion {n:>2} {name}: {detail} ({secs:.2}s, limit {limit_s}s)\n");
    let _ = std::io::stdout().write_all(line.as_bytes());
    if let Err(e) = outcome {
        panic!("criterion {n} failed: {e}");
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn traces_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../cli/traces")
}

#[test]
fn criterion_01_codec_round_trip() {
    criterion(1, "codec round trip", 10.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let widths = [Bitwidth::B2, Bitwidth::B4, Bitwidth::B8];
        for case in 0..10_000 {
            let b = widths[rng.random_range(0..3)];
            let per_word = 32 / b.bits() as u32;
            let tile = 4 * per_word * rng.random_range(1..=8u32);
            let len = rng.random_range(0..=2_000usize);
            let q: Vec<u32> = (0..len).map(|_| rng.random_range(0..=b.max_level())).collect();
            let qp = QuantParams {
                bitwidth: b,
                min: rng.random_range(-5.0f32..5.0),
                scale: rng.random_range(0.0f32..2.0),
            };
            let buf = bitcodec::pack(&q, &qp, tile).map_err(|e| e.to_string())?;
            ensure(buf.words() == reference_pack(&q, b.bits() as u32, tile as usize).as_slice(), || {
                format!("case {case}: words differ from the scalar reference packer")
            })?;
            let back = bitcodec::unpack(&buf).map_err(|e| e.to_string())?;
            ensure(back == q, || format!("case {case}: unpack(pack(x)) != x (b={b}, len={len}, tile={tile})"))?;
            let bytes = bitcodec::serialize(&buf);
            let again = bitcodec::deserialize(&bytes).map_err(|e| e.to_string())?;
            ensure(again == buf, || format!("case {case}: serialization round trip differs"))?;
        }
        let q: Vec<u32> = (0..32).map(|i| i % 16).collect();
        let qp = QuantParams {
            bitwidth: Bitwidth::B4,
            min: 0.0,
            scale: 1.0,
        };
        let buf = bitcodec::pack(&q, &qp, 32).map_err(|e| e.to_string())?;
        let expect = [0x048C_048Cu32, 0x159D_159D, 0x26AE_26AE, 0x37BF_37BF];
        ensure(buf.words() == expect, || format!("worked example gave {:08X?}", buf.words()))?;
        ensure(reference_pack(&q, 4, 32) == expect, || "scalar reference disagrees with worked example".into())?;
        Ok("10^4 cases exact; worked example words match".into())
    });
}

#[test]
fn criterion_02_float_bit_trick() {
    criterion(2, "float-bit trick", 5.0, || {
        for x in 0..=(1u32 << 16) {
            let v = uint_bits_to_float(x).map_err(|e| e.to_string())?;
            ensure(v == x as f32, || format!("{x} -> {v}"))?;
            ensure(float_to_uint_bits(v).map_err(|e| e.to_string())? == x, || format!("{x} does not invert"))?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1_000_000 {
            let x = rng.random_range(0..(1u32 << 23));
            let v = uint_bits_to_float(x).map_err(|e| e.to_string())?;
            ensure(v == x as f32, || format!("{x} -> {v}"))?;
        }
        ensure(f32::from_bits(0x4B00_0000) == 8_388_608.0, || "0x4B000000 is not 2^23".into())?;
        ensure((0.0f32 + 8_388_608.0).to_bits() == 0x4B00_0000, || "0 + 2^23 is not 0x4B000000".into())?;
        ensure(uint_bits_to_float(0).unwrap() == 0.0, || "0 does not map to 0.0".into())?;
        ensure(uint_bits_to_float(1 << 23).is_err(), || "2^23 accepted".into())?;
        Ok("exhaustive [0, 2^16] + 10^6 random exact".into())
    });
}

#[test]
fn criterion_03_reduction_equivalence() {
    criterion(3, "reduction equivalence", 60.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0f32, 1.0).unwrap();
        let mut checked = 0usize;
        let mut elements = 0usize;
        for i in 0..1_000usize {
            let numel = match i {
                0 => 256 * 14 * 14,
                1 => 512 * 768,
                2 => 1,
                3 => 1_000_000,
                _ => (10f64.powf(rng.random_range(0.0..6.0)) as usize).clamp(1, 1_000_000),
            };
            let scale = 10f32.powi(rng.random_range(-3..4));
            let x: Vec<f32> = (0..numel).map(|_| normal.sample(&mut rng) * scale).collect();
            elements += numel;
            let workers = 1 + i % 64;
            let tpb = 1usize << rng.random_range(0..=8);
            for op in [ReduceOp::Min, ReduceOp::Max] {
                let expect = reduce_sequential(&x, op).map_err(|e| e.to_string())?;
                for strategy in Strategy::ALL {
                    let cfg = ReduceConfig::new(workers, tpb, strategy).map_err(|e| e.to_string())?;
                    let got = reduce(&x, op, &cfg).map_err(|e| e.to_string())?;
                    ensure(got == expect, || {
                        format!("{strategy} {op:?} n={numel} workers={workers} tpb={tpb}: {got} != {expect}")
                    })?;
                    checked += 1;
                }
            }
        }
        // Randomized thread schedules for the atomic combiners.
        let x: Vec<f32> = (0..50_176).map(|_| normal.sample(&mut rng)).collect();
        for seed in 0..100u64 {
            let workers = rng.random_range(1..=64);
            for op in [ReduceOp::Min, ReduceOp::Max] {
                let expect = reduce_sequential(&x, op).unwrap();
                for strategy in [Strategy::Atomic, Strategy::Hybrid, Strategy::AtomicThenAtomic] {
                    let cfg = ReduceConfig::new(workers, 32, strategy).unwrap();
                    let got = reduce_with_schedule(&x, op, &cfg, seed).map_err(|e| e.to_string())?;
                    ensure(got == expect, || format!("schedule {seed}: {strategy} {op:?} {got} != {expect}"))?;
                }
            }
        }
        Ok(format!(
            "{checked} strategy runs over {elements} elements + 600 scheduled atomic runs agree"
        ))
    });
}

fn shadow_err(e: &Error) -> Option<ShadowError> {
    Some(match e {
        Error::Duplicate(_) => ShadowError::Duplicate,
        Error::StoreRejected(_) => ShadowError::Rejected,
        Error::NoSpace { .. } => ShadowError::NoSpace,
        Error::NotFound(_) => ShadowError::Missing,
        Error::MustEvict(_) => ShadowError::MustEvict,
        _ => return None,
    })
}

fn pagestore_trace(seed: u64, events: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let page = [64u64, 256, 1024][rng.random_range(0..3)];
    let step = page * rng.random_range(4..16);
    let budget = step * rng.random_range(2..8) + rng.random_range(0..step);
    let mut store = PageStore::new(budget, page, step).map_err(|e| e.to_string())?;
    let mut shadow = ShadowStore::new(budget, page, step);
    let mut content: std::collections::HashMap<u64, Vec<u8>> = Default::default();
    let mut evicted = Vec::new();
    let mut next_id = 0u64;
    let widths = [Bitwidth::B2, Bitwidth::B4, Bitwidth::B8, Bitwidth::FULL];
    for ev in 0..events {
        let residents: Vec<u64> = store.entries().map(|e| e.act_id).collect();
        let roll = rng.random_range(0..100);
        let pick = |rng: &mut ChaCha8Rng| residents[rng.random_range(0..residents.len())];
        match roll {
            0..45 => {
                let id = if rng.random_bool(0.05) && !residents.is_empty() { pick(&mut rng) } else { next_id };
                next_id += 1;
                let size = rng.random_range(1..=3 * page);
                let time = if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..10.0) };
                let imp = if rng.random_bool(0.05) { 0.0 } else { rng.random_range(0.0..100.0) };
                let b = widths[rng.random_range(0..4)];
                let bytes: Vec<u8> = (0..size).map(|_| rng.random()).collect();
                let got = store.insert(ActivationEntry::new(id, size, b, size, time, imp), &bytes);
                let want = shadow.insert(id, size, time, imp, b.bits());
                match (&got, &want) {
                    (Ok(a), Ok(b)) if a == b => {
                        content.insert(id, bytes);
                    }
                    (Err(e), Err(w)) if shadow_err(e) == Some(*w) => {}
                    _ => return Err(format!("event {ev}: insert {id} store {got:?} shadow {want:?}")),
                }
            }
            45..60 => {
                let kind = if rng.random_bool(0.5) { TreeKind::Mem } else { TreeKind::Time };
                let sk = if kind == TreeKind::Mem { ShadowKind::Mem } else { ShadowKind::Time };
                let got = store.select_victim(kind).ok();
                ensure(got == shadow.victim(sk), || format!("event {ev}: victim {got:?} vs {:?}", shadow.victim(sk)))?;
                if let Some(id) = got {
                    store.evict(id).map_err(|e| e.to_string())?;
                    shadow.evict(id).unwrap();
                    evicted.push(id);
                    content.remove(&id);
                }
            }
            60..70 if !residents.is_empty() => {
                let id = pick(&mut rng);
                store.evict(id).map_err(|e| e.to_string())?;
                shadow.evict(id).unwrap();
                evicted.push(id);
                content.remove(&id);
            }
            70..82 if !residents.is_empty() => {
                let id = pick(&mut rng);
                let e = store.get(id).unwrap().clone();
                let nb = e.bitwidth.step_down().unwrap_or(Bitwidth::B2);
                let size = rng.random_range(1..=e.size_bytes);
                let bytes: Vec<u8> = (0..size).map(|_| rng.random()).collect();
                let got = store.update_size(id, nb, &bytes);
                let want = shadow.shrink(id, nb.bits(), size);
                match (&got, &want) {
                    (Ok(a), Ok(b)) if a == b => {
                        content.insert(id, bytes);
                    }
                    (Err(e), Err(w)) if shadow_err(e) == Some(*w) => {}
                    _ => return Err(format!("event {ev}: shrink {id} store {got:?} shadow {want:?}")),
                }
            }
            82..92 if !residents.is_empty() => {
                let id = pick(&mut rng);
                let imp = rng.random_range(0.0..100.0);
                store.update_importance(id, imp, imp).map_err(|e| e.to_string())?;
                shadow.entries.iter_mut().find(|e| e.id == id).unwrap().importance = imp;
            }
            92..100 => {
                let new_budget = rng.random_range(step..=step * 8);
                let before = shadow.evicted.len();
                let actions = store.resize_budget(new_budget).map_err(|e| e.to_string())?;
                shadow.resize(new_budget);
                let got: Vec<u64> = actions
                    .iter()
                    .filter_map(|a| match a {
                        ForcedAction::Evicted(id) => Some(*id),
                        _ => None,
                    })
                    .collect();
                ensure(got == shadow.evicted[before..], || {
                    format!("event {ev}: resize evictions {got:?} vs {:?}", &shadow.evicted[before..])
                })?;
                for id in got {
                    evicted.push(id);
                    content.remove(&id);
                }
            }
            _ => {}
        }
        // Full comparison after every event.
        let b = store.budget();
        ensure(b.mem_used <= b.mem_budget, || format!("event {ev}: mem_used {} > budget {}", b.mem_used, b.mem_budget))?;
        ensure(b.mem_used == shadow.mem_used(), || format!("event {ev}: mem_used differs"))?;
        ensure(store.capacity() == shadow.capacity, || format!("event {ev}: capacity differs"))?;
        ensure(evicted == shadow.evicted, || format!("event {ev}: eviction sequences differ"))?;
        ensure(store.trees().order(TreeKind::Mem) == shadow.order(ShadowKind::Mem), || format!("event {ev}: mem order differs"))?;
        ensure(store.trees().order(TreeKind::Time) == shadow.order(ShadowKind::Time), || format!("event {ev}: time order differs"))?;
        for e in store.entries() {
            ensure(shadow.pages_of(e.act_id).as_ref() == Some(&e.page_span), || {
                format!("event {ev}: pages of {} differ", e.act_id)
            })?;
            ensure(store.read(e.act_id).unwrap() == content[&e.act_id], || {
                format!("event {ev}: bytes of {} corrupted", e.act_id)
            })?;
        }
        store.check_invariants().map_err(|e| format!("event {ev}: {e}"))?;
    }
    Ok(())
}

#[test]
fn criterion_04_pagestore_oracle() {
    criterion(4, "pagestore oracle equivalence", 30.0, || {
        for seed in 0..20 {
            pagestore_trace(seed, 1_000).map_err(|e| format!("trace {seed}: {e}"))?;
        }
        Ok("20 traces x 10^3 events: pages, evictions, tree orders identical; budget held".into())
    });
}

#[test]
fn criterion_05_red_black_speedup() {
    criterion(5, "dual-tree vs re-sort speedup", 120.0, || {
        const N: usize = 10_000;
        const ITERS: usize = 1_000;
        const CHURN: usize = N / 50;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let size: Vec<f64> = (0..N).map(|_| rng.random_range(1e3..1e6)).collect();
        let time: Vec<f64> = (0..N).map(|_| rng.random_range(1.0..100.0)).collect();
        let mut imp: Vec<f64> = (0..N).map(|_| rng.random_range(0.0..1.0)).collect();
        let updates: Vec<Vec<(usize, f64)>> = (0..ITERS)
            .map(|_| (0..CHURN).map(|_| (rng.random_range(0..N), rng.random_range(0.0..1.0))).collect())
            .collect();

        let mut trees = DualTrees::new();
        for i in 0..N {
            trees
                .insert(i as u64, Density::of(imp[i], size[i]), Density::of(imp[i], time[i]))
                .unwrap();
        }
        let t = Instant::now();
        let mut tree_victims = Vec::with_capacity(ITERS);
        for batch in &updates {
            for &(i, v) in batch {
                trees
                    .rekey(i as u64, Density::of(v, size[i]), Density::of(v, time[i]))
                    .unwrap();
            }
            tree_victims.push((trees.min(TreeKind::Mem).unwrap().1, trees.min(TreeKind::Time).unwrap().1));
        }
        let incremental = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let mut sort_victims = Vec::with_capacity(ITERS);
        let mut mem_keys: Vec<(Density, u64)> = Vec::with_capacity(N);
        let mut time_keys: Vec<(Density, u64)> = Vec::with_capacity(N);
        for batch in &updates {
            for &(i, v) in batch {
                imp[i] = v;
            }
            mem_keys.clear();
            time_keys.clear();
            for i in 0..N {
                mem_keys.push((Density::of(imp[i], size[i]), i as u64));
                time_keys.push((Density::of(imp[i], time[i]), i as u64));
            }
            mem_keys.sort_unstable();
            time_keys.sort_unstable();
            sort_victims.push((mem_keys[0].1, time_keys[0].1));
        }
        let resort = t.elapsed().as_secs_f64();
        ensure(tree_victims == sort_victims, || "victim sequences differ".into())?;
        let ratio = resort / incremental;
        ensure(ratio >= 2.0, || format!("speedup {ratio:.2}x < 2.0x"))?;
        Ok(format!(
            "speedup {ratio:.2}x (incremental {:.3}s, re-sort {:.3}s)",
            incremental, resort
        ))
    });
}

#[test]
fn criterion_06_compression_regime() {
    criterion(6, "compression regime", 30.0, || {
        let text = std::fs::read_to_string(traces_dir().join("resnet18_like.jsonl")).map_err(|e| e.to_string())?;
        let events = trace::parse_trace(&text).map_err(|e| e.to_string())?;
        let fp32 = trace::fp32_bytes_per_iter(&events);
        let budget = fp32 / 18;
        let mut cfg = ReplayConfig::new(budget);
        cfg.check_invariants = true;
        let r = trace::replay(&events, &cfg).map_err(|e| e.to_string())?;
        ensure(!r.metrics.is_empty(), || "no iterations replayed".into())?;
        for m in &r.metrics {
            ensure(m.mem_used <= budget, || format!("iter {}: {} > {budget}", m.iter, m.mem_used))?;
        }
        let ratio = r.overall_ratio();
        ensure(ratio >= 16.0, || format!("ratio {ratio:.2}x < 16x"))?;

        let mut fixed = ReplayConfig::new(fp32);
        fixed.ladder = Ladder::Fixed(Bitwidth::B4);
        let r4 = trace::replay(&events, &fixed).map_err(|e| e.to_string())?;
        ensure(r4.decisions.iter().all(|d| d.decision.action == Action::StoreAt(Bitwidth::B4)), || {
            "uniform 4-bit run dropped or narrowed something".into()
        })?;
        let ratio4 = r4.overall_ratio();
        ensure(ratio4 >= 7.5, || format!("uniform 4-bit ratio {ratio4:.3}x < 7.5x"))?;
        Ok(format!(
            "ladder+dropping {ratio:.2}x at fp32/18 ({} iters in budget); uniform 4-bit {ratio4:.3}x",
            r.metrics.len()
        ))
    });
}

#[test]
fn criterion_07_dynamic_budget() {
    criterion(7, "dynamic budget", 10.0, || {
        const MB: u64 = 1 << 20;
        let shapes: Vec<u64> = (0..40).map(|i| 65_536 + 8_192 * (i % 9)).collect();
        let cfg = synth::SynthConfig {
            iterations: 12,
            seed: 7,
            ..Default::default()
        };
        let events = synth::trace(&shapes, &cfg, &[(6, 3 * MB)]);
        let change_at = events
            .iter()
            .position(|e| matches!(e, TraceEvent::BudgetChange { .. }))
            .unwrap();
        let change_iter = events[change_at].iter();
        let mut rc = ReplayConfig::new(8 * MB);
        rc.step = Some(MB);
        rc.check_invariants = true;
        let r = trace::replay(&events, &rc).map_err(|e| e.to_string())?;
        let mut post = 0;
        for m in &r.metrics {
            let budget = if m.iter >= change_iter { 3 * MB } else { 8 * MB };
            ensure(m.mem_used <= budget, || format!("iter {}: {} > {budget}", m.iter, m.mem_used))?;
            if m.iter >= change_iter {
                post += 1;
                let target = budget / MB * MB;
                ensure(m.capacity <= target && target - m.capacity <= MB, || {
                    format!("iter {}: capacity {} not within a step of {target}", m.iter, m.capacity)
                })?;
            }
        }
        let peak_before = r.metrics.iter().filter(|m| m.iter < change_iter).map(|m| m.mem_used).max().unwrap_or(0);
        Ok(format!(
            "peak {:.2} MiB before, {post} iterations after drop all <= 3 MiB",
            peak_before as f64 / MB as f64
        ))
    });
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f32) -> Matrix {
    let normal = Normal::new(0.0f32, scale).unwrap();
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect()).unwrap()
}

fn store_parts(b: Bitwidth, budget: u64) -> (PageStore, Policy) {
    (
        PageStore::new(budget, 256, budget / 256 * 256).unwrap(),
        Policy::new(PolicyConfig {
            ladder: Ladder::Fixed(b),
            ..PolicyConfig::default()
        }),
    )
}

#[test]
fn criterion_08_gradient_correctness() {
    criterion(8, "gradient correctness", 30.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut worst_fd = 0.0f64;
        for case in 0..200 {
            let batch = rng.random_range(1..=8);
            let layer = DenseLayer::random(5, 2, false, &mut rng);
            let x = random_matrix(&mut rng, batch, 5, 1.0);
            let g = random_matrix(&mut rng, batch, 2, 1.0);
            let (_, exact_tape) = forward(&layer, &x, 0, None).map_err(|e| e.to_string())?;
            let reference = backward(&layer, &g, &exact_tape, None, Some(&x)).map_err(|e| e.to_string())?;
            for b in [Bitwidth::FULL, Bitwidth::B8, Bitwidth::B4, Bitwidth::B2] {
                let (mut store, mut policy) = store_parts(b, 1 << 16);
                let mut ctx = StoreCtx {
                    store: &mut store,
                    policy: &mut policy,
                    metric: ImportanceMetric::Range,
                };
                let (_, tape) = forward(&layer, &x, 0, Some(&mut ctx)).map_err(|e| e.to_string())?;
                let got = backward(&layer, &g, &tape, Some(&store), None).map_err(|e| e.to_string())?;
                ensure(got.grad_in == reference.grad_in, || format!("case {case}: grad_in depends on {b}-bit storage"))?;
                if b == Bitwidth::FULL {
                    ensure(got == reference, || format!("case {case}: 32-bit gradients differ from reference"))?;
                    continue;
                }
                // Central differences of L(W) = sum(G * (X_hat W^T + bias)) in f64.
                let xhat: Vec<f64> = store.read_payload(0).unwrap().decode().unwrap().iter().map(|&v| v as f64).collect();
                let loss = |w: &[f64]| -> f64 {
                    let mut l = 0.0;
                    for i in 0..batch {
                        for o in 0..2 {
                            let mut y = layer.bias[o] as f64;
                            for k in 0..5 {
                                y += xhat[i * 5 + k] * w[o * 5 + k];
                            }
                            l += g.at(i, o) as f64 * y;
                        }
                    }
                    l
                };
                let w0: Vec<f64> = layer.w.data.iter().map(|&v| v as f64).collect();
                let h = 1e-3;
                let (mut num, mut den) = (0.0f64, 0.0f64);
                for p in 0..10 {
                    let mut wp = w0.clone();
                    let mut wm = w0.clone();
                    wp[p] += h;
                    wm[p] -= h;
                    let fd = (loss(&wp) - loss(&wm)) / (2.0 * h);
                    num = num.max((fd - got.grad_w.data[p] as f64).abs());
                    den = den.max(fd.abs());
                }
                let rel = num / den.max(1e-12);
                worst_fd = worst_fd.max(rel);
                ensure(rel <= 1e-3, || format!("case {case}: {b}-bit grad_W off by {rel:.2e} relative"))?;
            }
        }
        Ok(format!(
            "200 layers: 32-bit bit-exact, grad_in identical across widths, worst FD rel err {worst_fd:.2e}"
        ))
    });
}

#[test]
fn criterion_09_accuracy_proxy() {
    criterion(9, "accuracy proxy", 60.0, || {
        let records = refnet::train(&TrainConfig::default()).map_err(|e| e.to_string())?;
        let last = records.last().ok_or("no epochs")?;
        let gap = (last.fp32_acc - last.quant_acc) * 100.0;
        ensure(records.len() == 20, || "expected 20 epochs".into())?;
        ensure(gap.abs() <= 1.0, || {
            format!("fp32 {:.2}% vs 4-bit {:.2}%", last.fp32_acc * 100.0, last.quant_acc * 100.0)
        })?;
        Ok(format!(
            "fp32 {:.2}%, 4-bit {:.2}% (gap {gap:+.2} pp)",
            last.fp32_acc * 100.0,
            last.quant_acc * 100.0
        ))
    });
}

#[test]
fn criterion_10_forward_invariance() {
    criterion(10, "forward invariance", 10.0, || {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let ladders = [
            Ladder::Quartile,
            Ladder::Fixed(Bitwidth::SKIP),
            Ladder::Fixed(Bitwidth::B2),
            Ladder::Fixed(Bitwidth::B4),
            Ladder::Fixed(Bitwidth::B8),
            Ladder::Fixed(Bitwidth::FULL),
        ];
        for case in 0..100 {
            let (ins, outs, batch) = (rng.random_range(1..=32), rng.random_range(1..=32), rng.random_range(1..=16));
            let layer = DenseLayer::random(ins, outs, rng.random_bool(0.5), &mut rng);
            let scale = 10f32.powi(rng.random_range(-2..3));
            let x = random_matrix(&mut rng, batch, ins, scale);
            let budget = if rng.random_bool(0.3) { 256 } else { 1 << 20 };
            let mut store = PageStore::new(budget, 256, 256).unwrap();
            let mut policy = Policy::new(PolicyConfig {
                ladder: ladders[rng.random_range(0..ladders.len())],
                ..PolicyConfig::default()
            });
            let (plain, _) = forward_plain(&layer, &x).map_err(|e| e.to_string())?;
            let mut ctx = StoreCtx {
                store: &mut store,
                policy: &mut policy,
                metric: ImportanceMetric::QuantErrorEstimate,
            };
            let (y, _) = forward(&layer, &x, case, Some(&mut ctx)).map_err(|e| e.to_string())?;
            let bits = |m: &Matrix| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            ensure(bits(&y) == bits(&plain), || format!("case {case}: outputs differ"))?;
        }
        Ok("100 configurations bit-identical".into())
    });
}
