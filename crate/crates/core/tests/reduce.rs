use actstore_core::par::Exec;
use actstore_core::reduce::{
    fused_map_reduce_with, profile_select_strategy, reduce, reduce_sequential, reduce_with_schedule, ProfileTable,
    ReduceConfig, ReduceOp, Reducer, Strategy,
};
use proptest::prelude::*;

fn oracle(x: &[f32], op: ReduceOp) -> f32 {
    match op {
        ReduceOp::Min => x.iter().copied().fold(f32::INFINITY, f32::min),
        ReduceOp::Max => x.iter().copied().fold(f32::NEG_INFINITY, f32::max),
    }
}

fn op() -> impl proptest::strategy::Strategy<Value = ReduceOp> {
    prop_oneof![Just(ReduceOp::Min), Just(ReduceOp::Max)]
}

fn strategy() -> impl proptest::strategy::Strategy<Value = Strategy> {
    prop::sample::select(Strategy::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn every_strategy_matches_the_scan(
        x in prop::collection::vec(prop::num::f32::NORMAL | prop::num::f32::ZERO, 1..5000),
        op in op(),
        st in strategy(),
        blocks in 1usize..64,
        tpb_log in 0u32..9,
    ) {
        let cfg = ReduceConfig::new(blocks, 1 << tpb_log, st).unwrap();
        let want = oracle(&x, op);
        prop_assert_eq!(reduce(&x, op, &cfg).unwrap(), want);
        prop_assert_eq!(reduce_sequential(&x, op).unwrap(), want);
    }

    #[test]
    fn jittered_schedules_agree(
        x in prop::collection::vec(-1.0e6f32..1.0e6, 1..3000),
        op in op(),
        st in strategy(),
        seed in any::<u64>(),
    ) {
        let cfg = ReduceConfig::new(8, 32, st).unwrap();
        prop_assert_eq!(reduce_with_schedule(&x, op, &cfg, seed).unwrap(), oracle(&x, op));
    }

    #[test]
    fn fused_map_reduce_equals_map_then_reduce(
        x in prop::collection::vec(-1.0e3f32..1.0e3, 1..20000),
        op in op(),
    ) {
        let relu = |v: f32| v.max(0.0);
        let mapped: Vec<f32> = x.iter().map(|&v| relu(v)).collect();
        for exec in [Exec::Sequential, Exec::Parallel] {
            let (y, r) = fused_map_reduce_with(exec, &x, relu, op).unwrap();
            prop_assert_eq!(&y, &mapped);
            prop_assert_eq!(r, oracle(&mapped, op));
        }
    }
}

#[test]
fn empty_input_is_an_error() {
    let cfg = ReduceConfig::auto(0, Strategy::Hybrid);
    assert!(reduce(&[], ReduceOp::Min, &cfg).is_err());
    assert!(reduce_sequential(&[], ReduceOp::Max).is_err());
}

#[test]
fn bad_geometry_is_rejected() {
    assert!(ReduceConfig::new(0, 32, Strategy::Atomic).is_err());
    assert!(ReduceConfig::new(4, 48, Strategy::Atomic).is_err());
}

#[test]
fn infinities_survive_every_strategy() {
    let x = [1.0, f32::INFINITY, -2.0, f32::NEG_INFINITY];
    for st in Strategy::ALL {
        let cfg = ReduceConfig::new(3, 2, st).unwrap();
        assert_eq!(reduce(&x, ReduceOp::Min, &cfg).unwrap(), f32::NEG_INFINITY);
        assert_eq!(reduce(&x, ReduceOp::Max, &cfg).unwrap(), f32::INFINITY);
    }
}

#[test]
fn profile_table_round_trips_through_a_file() {
    let table = profile_select_strategy(&[100, 10_000, 200_000], 3).unwrap();
    assert_eq!(table.buckets.len(), 3);
    assert_eq!(table.lookup(1), Some(table.buckets[0].strategy));
    assert_eq!(table.lookup(10_000_000), Some(table.buckets[2].strategy));
    let dir = std::env::temp_dir().join(format!("actstore-profile-{}", std::process::id()));
    table.save(&dir).unwrap();
    assert_eq!(ProfileTable::load(&dir).unwrap(), table);
    std::fs::remove_file(&dir).unwrap();
    let r = Reducer::with_table(table);
    let x: Vec<f32> = (0..50_000).map(|i| ((i * 7919) % 1000) as f32 - 500.0).collect();
    assert_eq!(r.min_max(&x).unwrap(), (-500.0, 499.0));
}

#[test]
fn malformed_profile_table_is_rejected() {
    assert!(ProfileTable::from_text("1\t2").is_err());
    assert!(ProfileTable::from_text("5\t2\tsequential").is_err());
    assert!(ProfileTable::from_text("1\t2\tbogus").is_err());
    assert!(ProfileTable::from_text("\n").unwrap().is_empty());
}

/// On a multi-core host the parallel strategies should beat a single scan at
/// a million elements; on one core there is nothing to measure.
#[test]
fn profiling_prefers_parallel_on_multicore() {
    if std::thread::available_parallelism().map_or(1, |n| n.get()) < 2 || !cfg!(feature = "parallel") {
        eprintln!("single core: skipping parallel-speed check");
        return;
    }
    let table = profile_select_strategy(&[1_000_000], 7).unwrap();
    assert_ne!(table.lookup(1_000_000), Some(Strategy::Sequential));
}
