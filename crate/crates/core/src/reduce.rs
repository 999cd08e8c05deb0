//! Min/max collective reductions.
//!
//! Four interchangeable strategies compute the same value:
//!
//! * **Sequential**: a left-to-right scan, used as the oracle.
//! * **ParallelTree**: every block loads its partition into `threads_per_block`
//!   lanes and halves the live lanes each round, writing one partial per block
//!   to a scratch array; the pass repeats over the scratch array until a
//!   single value remains.
//! * **Atomic**: every block scans its partition and folds the partial into a
//!   single shared cell with a compare-and-swap loop.
//! * **Hybrid**: tree reduction inside a block, atomic combination across blocks.
//! * **AtomicThenAtomic**: lanes fold into a per-block cell, blocks fold into
//!   the shared cell.
//!
//! Blocks map to worker tasks on the rayon pool; lanes are simulated inside a
//! worker. Min and max are exact and order independent, so every strategy is
//! bit-for-bit equal to the scan (up to the sign of zero, see
//! [`ReduceOp::combine`]).

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicU32, Ordering};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::par::{self, Exec};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReduceOp {
    Min,
    Max,
}

impl ReduceOp {
    /// Padding value for ragged tails and the initial value of atomic cells.
    pub fn identity(self) -> f32 {
        match self {
            ReduceOp::Min => f32::INFINITY,
            ReduceOp::Max => f32::NEG_INFINITY,
        }
    }

    /// `fmin`/`fmax`. Signed zeros compare equal, so either zero may win.
    #[inline]
    pub fn combine(self, a: f32, b: f32) -> f32 {
        match self {
            ReduceOp::Min => a.min(b),
            ReduceOp::Max => a.max(b),
        }
    }

    #[inline]
    fn scan(self, xs: &[f32]) -> f32 {
        xs.iter().fold(self.identity(), |acc, &v| self.combine(acc, v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Sequential,
    ParallelTree,
    Atomic,
    Hybrid,
    AtomicThenAtomic,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Sequential,
        Strategy::ParallelTree,
        Strategy::Atomic,
        Strategy::Hybrid,
        Strategy::AtomicThenAtomic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Sequential => "sequential",
            Strategy::ParallelTree => "parallel_tree",
            Strategy::Atomic => "atomic",
            Strategy::Hybrid => "hybrid",
            Strategy::AtomicThenAtomic => "atomic_then_atomic",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown reduction strategy `{s}`")))
    }
}

/// Launch geometry: blocks become worker tasks, lanes are simulated threads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReduceConfig {
    num_blocks: usize,
    threads_per_block: usize,
    pub strategy: Strategy,
}

impl ReduceConfig {
    pub fn new(num_blocks: usize, threads_per_block: usize, strategy: Strategy) -> Result<Self> {
        if num_blocks == 0 {
            return Err(Error::invalid("num_blocks must be positive"));
        }
        if !threads_per_block.is_power_of_two() {
            return Err(Error::invalid(format!(
                "threads_per_block must be a power of two, got {threads_per_block}"
            )));
        }
        Ok(Self {
            num_blocks,
            threads_per_block,
            strategy,
        })
    }

    /// A reasonable geometry for `len` elements on this host.
    pub fn auto(len: usize, strategy: Strategy) -> Self {
        let threads_per_block = 32;
        let max_blocks = (4 * par::num_workers()).max(4);
        let num_blocks = (len / 4096).clamp(1, max_blocks);
        Self {
            num_blocks,
            threads_per_block,
            strategy,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn threads_per_block(&self) -> usize {
        self.threads_per_block
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = strategy;
        self
    }
}

/// A 32-bit float updated only through compare-and-swap on its bit pattern.
#[derive(Debug)]
pub struct AtomicFloatCell {
    bits: AtomicU32,
}

impl AtomicFloatCell {
    pub fn new(v: f32) -> Self {
        Self {
            bits: AtomicU32::new(v.to_bits()),
        }
    }

    pub fn load(&self) -> f32 {
        f32::from_bits(self.bits.load(Ordering::Acquire))
    }

    /// Atomic float minimum; returns the value seen before the final swap.
    pub fn fetch_min(&self, val: f32) -> Result<f32> {
        self.fetch_op(ReduceOp::Min, val)
    }

    pub fn fetch_max(&self, val: f32) -> Result<f32> {
        self.fetch_op(ReduceOp::Max, val)
    }

    pub fn fetch_op(&self, op: ReduceOp, val: f32) -> Result<f32> {
        if val.is_nan() {
            return Err(Error::invalid("NaN passed to atomic float reduction"));
        }
        Ok(self.cas_loop(op, val).0)
    }

    /// Like [`fetch_op`](Self::fetch_op) but also reports whether the
    /// successful swap changed the stored bit pattern.
    pub fn fetch_op_counted(&self, op: ReduceOp, val: f32) -> Result<(f32, bool)> {
        if val.is_nan() {
            return Err(Error::invalid("NaN passed to atomic float reduction"));
        }
        Ok(self.cas_loop(op, val))
    }

    // Reinterpret the word as a float, combine, and swap the new bit pattern
    // in; retry until nobody else wrote between the read and the swap.
    fn cas_loop(&self, op: ReduceOp, val: f32) -> (f32, bool) {
        let mut old = self.bits.load(Ordering::Acquire);
        loop {
            let assumed = old;
            let new_val = op.combine(f32::from_bits(assumed), val);
            match self.bits.compare_exchange(
                assumed,
                new_val.to_bits(),
                Ordering::AcqRel,
                Ordering::Acquire,
            ) {
                Ok(_) => return (f32::from_bits(assumed), new_val.to_bits() != assumed),
                Err(current) => old = current,
            }
        }
    }
}

/// One block of a tree reduction: `threads_per_block` lanes, halved each round.
#[derive(Debug, Clone)]
pub struct SimulatedBlock {
    op: ReduceOp,
    lanes: Vec<f32>,
    live: usize,
    rounds: usize,
}

impl SimulatedBlock {
    /// Each lane scans a stride of the block's partition (lane `t` reads
    /// elements `t`, `t + lanes`, ...). Lanes with no data hold the identity.
    pub fn load(op: ReduceOp, chunk: &[f32], threads_per_block: usize) -> Self {
        debug_assert!(threads_per_block.is_power_of_two());
        let mut lanes = vec![op.identity(); threads_per_block];
        for row in chunk.chunks(threads_per_block) {
            for (lane, &v) in lanes.iter_mut().zip(row) {
                *lane = op.combine(*lane, v);
            }
        }
        Self {
            op,
            lanes,
            live: threads_per_block,
            rounds: 0,
        }
    }

    pub fn live_lanes(&self) -> usize {
        self.live
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// One halving round followed by a barrier. Returns `false` once a single
    /// lane remains.
    pub fn round(&mut self) -> bool {
        if self.live <= 1 {
            return false;
        }
        let half = self.live / 2;
        let (lo, hi) = self.lanes.split_at_mut(half);
        for (a, &b) in lo.iter_mut().zip(&hi[..half]) {
            *a = self.op.combine(*a, b);
        }
        // Barrier: the next round only reads lanes written in this one.
        self.live = half;
        self.rounds += 1;
        true
    }

    pub fn finish(mut self) -> f32 {
        while self.round() {}
        self.lanes[0]
    }
}

fn check_non_empty(x: &[f32]) -> Result<()> {
    if x.is_empty() {
        Err(Error::invalid("reduction over an empty tensor"))
    } else {
        Ok(())
    }
}

/// Partition length per block; the last block may be short.
fn block_len(len: usize, num_blocks: usize) -> usize {
    len.div_ceil(num_blocks).max(1)
}

/// How block workers are launched.
#[derive(Debug, Clone, Copy)]
enum Launch {
    Pool(Exec),
    /// One OS thread per block, with seeded start order and random yields
    /// before each atomic update.
    Jittered(u64),
}

fn run_blocks<F>(launch: Launch, num_blocks: usize, f: F)
where
    F: Fn(usize, &mut dyn FnMut()) + Sync + Send,
{
    match launch {
        Launch::Pool(exec) => {
            par::map_indices(exec, num_blocks, |b| f(b, &mut || {}));
        }
        Launch::Jittered(seed) => {
            let mut order: Vec<usize> = (0..num_blocks).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            std::thread::scope(|s| {
                for &b in &order {
                    let f = &f;
                    let thread_seed = seed ^ (b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                    s.spawn(move || {
                        let mut rng = ChaCha8Rng::seed_from_u64(thread_seed);
                        let mut jitter = || {
                            for _ in 0..rng.random_range(0..4u32) {
                                std::thread::yield_now();
                            }
                        };
                        jitter();
                        f(b, &mut jitter);
                    });
                }
            });
        }
    }
}

/// Exact left-to-right scan.
pub fn reduce_sequential(x: &[f32], op: ReduceOp) -> Result<f32> {
    check_non_empty(x)?;
    Ok(op.scan(x))
}

pub fn reduce_parallel_tree(x: &[f32], op: ReduceOp, cfg: &ReduceConfig) -> Result<f32> {
    check_non_empty(x)?;
    Ok(tree_passes(x, op, cfg, Exec::Parallel))
}

fn tree_passes(x: &[f32], op: ReduceOp, cfg: &ReduceConfig, exec: Exec) -> f32 {
    let tpb = cfg.threads_per_block;
    let mut blocks = cfg.num_blocks.min(x.len());
    let mut current: Vec<f32>;
    let mut input = x;
    loop {
        let chunk = block_len(input.len(), blocks);
        let n = input.len().div_ceil(chunk);
        let scratch = par::map_indices(exec, n, |b| {
            let lo = b * chunk;
            let hi = (lo + chunk).min(input.len());
            SimulatedBlock::load(op, &input[lo..hi], tpb).finish()
        });
        if scratch.len() == 1 {
            return scratch[0];
        }
        // Next pass over the scratch array, strictly fewer blocks.
        blocks = cfg
            .num_blocks
            .min(scratch.len().div_ceil(tpb.max(2)))
            .max(1);
        current = scratch;
        input = &current;
    }
}

pub fn reduce_atomic(x: &[f32], op: ReduceOp, cfg: &ReduceConfig) -> Result<f32> {
    check_non_empty(x)?;
    Ok(atomic_blocks(x, op, cfg, Launch::Pool(Exec::Parallel)))
}

fn atomic_blocks(x: &[f32], op: ReduceOp, cfg: &ReduceConfig, launch: Launch) -> f32 {
    let cell = AtomicFloatCell::new(op.identity());
    let chunk = block_len(x.len(), cfg.num_blocks);
    let n = x.len().div_ceil(chunk);
    run_blocks(launch, n, |b, jitter| {
        let lo = b * chunk;
        let local = op.scan(&x[lo..(lo + chunk).min(x.len())]);
        jitter();
        cell.cas_loop(op, local);
    });
    cell.load()
}

pub fn reduce_hybrid(x: &[f32], op: ReduceOp, cfg: &ReduceConfig) -> Result<f32> {
    check_non_empty(x)?;
    Ok(hybrid_blocks(x, op, cfg, Launch::Pool(Exec::Parallel)))
}

fn hybrid_blocks(x: &[f32], op: ReduceOp, cfg: &ReduceConfig, launch: Launch) -> f32 {
    let cell = AtomicFloatCell::new(op.identity());
    let chunk = block_len(x.len(), cfg.num_blocks);
    let n = x.len().div_ceil(chunk);
    run_blocks(launch, n, |b, jitter| {
        let lo = b * chunk;
        let partial =
            SimulatedBlock::load(op, &x[lo..(lo + chunk).min(x.len())], cfg.threads_per_block)
                .finish();
        jitter();
        cell.cas_loop(op, partial);
    });
    cell.load()
}

pub fn reduce_atomic_then_atomic(x: &[f32], op: ReduceOp, cfg: &ReduceConfig) -> Result<f32> {
    check_non_empty(x)?;
    Ok(two_level_atomic(x, op, cfg, Launch::Pool(Exec::Parallel)))
}

fn two_level_atomic(x: &[f32], op: ReduceOp, cfg: &ReduceConfig, launch: Launch) -> f32 {
    let global = AtomicFloatCell::new(op.identity());
    let chunk = block_len(x.len(), cfg.num_blocks);
    let n = x.len().div_ceil(chunk);
    let tpb = cfg.threads_per_block;
    run_blocks(launch, n, |b, jitter| {
        let lo = b * chunk;
        let part = &x[lo..(lo + chunk).min(x.len())];
        let block_cell = AtomicFloatCell::new(op.identity());
        for lane in 0..tpb.min(part.len()) {
            let lane_val = part
                .iter()
                .skip(lane)
                .step_by(tpb)
                .fold(op.identity(), |a, &v| op.combine(a, v));
            block_cell.cas_loop(op, lane_val);
        }
        jitter();
        global.cas_loop(op, block_cell.load());
    });
    global.load()
}

/// Dispatches on `cfg.strategy`.
pub fn reduce(x: &[f32], op: ReduceOp, cfg: &ReduceConfig) -> Result<f32> {
    match cfg.strategy {
        Strategy::Sequential => reduce_sequential(x, op),
        Strategy::ParallelTree => reduce_parallel_tree(x, op, cfg),
        Strategy::Atomic => reduce_atomic(x, op, cfg),
        Strategy::Hybrid => reduce_hybrid(x, op, cfg),
        Strategy::AtomicThenAtomic => reduce_atomic_then_atomic(x, op, cfg),
    }
}

/// Same as [`reduce`], but block workers run on dedicated threads started in
/// a seeded random order with random yields before each atomic update.
/// Strategies without atomics are unaffected by scheduling and run normally.
pub fn reduce_with_schedule(x: &[f32], op: ReduceOp, cfg: &ReduceConfig, seed: u64) -> Result<f32> {
    check_non_empty(x)?;
    let launch = Launch::Jittered(seed);
    Ok(match cfg.strategy {
        Strategy::Atomic => atomic_blocks(x, op, cfg, launch),
        Strategy::Hybrid => hybrid_blocks(x, op, cfg, launch),
        Strategy::AtomicThenAtomic => two_level_atomic(x, op, cfg, launch),
        Strategy::Sequential | Strategy::ParallelTree => return reduce(x, op, cfg),
    })
}

/// Reductions with a fixed default strategy and an optional profiled table.
#[derive(Debug, Clone)]
pub struct Reducer {
    default: Strategy,
    table: Option<ProfileTable>,
}

impl Default for Reducer {
    fn default() -> Self {
        Self {
            default: Strategy::Hybrid,
            table: None,
        }
    }
}

impl Reducer {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            default: strategy,
            table: None,
        }
    }

    pub fn with_table(table: ProfileTable) -> Self {
        Self {
            default: Strategy::Hybrid,
            table: Some(table),
        }
    }

    pub fn strategy_for(&self, len: usize) -> Strategy {
        self.table
            .as_ref()
            .and_then(|t| t.lookup(len))
            .unwrap_or(self.default)
    }

    pub fn reduce(&self, x: &[f32], op: ReduceOp) -> Result<f32> {
        reduce(x, op, &ReduceConfig::auto(x.len(), self.strategy_for(x.len())))
    }

    pub fn min_max(&self, x: &[f32]) -> Result<(f32, f32)> {
        Ok((self.reduce(x, ReduceOp::Min)?, self.reduce(x, ReduceOp::Max)?))
    }
}

/// Single pass computing `y = map(x)` and the reduction of `y`.
pub fn fused_map_reduce<F>(x: &[f32], map: F, op: ReduceOp) -> Result<(Vec<f32>, f32)>
where
    F: Fn(f32) -> f32 + Sync + Send,
{
    fused_map_reduce_with(Exec::Parallel, x, map, op)
}

pub fn fused_map_reduce_with<F>(
    exec: Exec,
    x: &[f32],
    map: F,
    op: ReduceOp,
) -> Result<(Vec<f32>, f32)>
where
    F: Fn(f32) -> f32 + Sync + Send,
{
    check_non_empty(x)?;
    let mut y = vec![0.0f32; x.len()];
    let chunk = block_len(x.len(), 4 * par::num_workers()).max(4096);
    let partials = par::zip_chunks(exec, x, chunk, &mut y, chunk, |_, xs, ys| {
        let mut acc = op.identity();
        for (o, &v) in ys.iter_mut().zip(xs) {
            let m = map(v);
            *o = m;
            acc = op.combine(acc, m);
        }
        acc
    });
    let r = op.scan(&partials);
    Ok((y, r))
}

/// One row of the profiling table: inclusive element-count range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProfileBucket {
    pub min_numel: u64,
    pub max_numel: u64,
    pub strategy: Strategy,
}

/// Size bucket to strategy map, persisted as `min\tmax\tstrategy` lines.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProfileTable {
    pub buckets: Vec<ProfileBucket>,
}

impl ProfileTable {
    pub fn is_empty(&self) -> bool {
        self.buckets.is_empty()
    }

    /// Strategy for `numel`; sizes past the last bucket use the last bucket.
    pub fn lookup(&self, numel: usize) -> Option<Strategy> {
        let n = numel as u64;
        self.buckets
            .iter()
            .find(|b| b.min_numel <= n && n <= b.max_numel)
            .or_else(|| self.buckets.last().filter(|b| n > b.max_numel))
            .map(|b| b.strategy)
    }

    pub fn to_text(&self) -> String {
        self.buckets
            .iter()
            .map(|b| format!("{}\t{}\t{}\n", b.min_numel, b.max_numel, b.strategy))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut buckets = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: &str| Error::invalid(format!("profile table line {}: {msg}", i + 1));
            let mut cols = line.split('\t');
            let (Some(lo), Some(hi), Some(st), None) =
                (cols.next(), cols.next(), cols.next(), cols.next())
            else {
                return Err(bad("expected three tab-separated columns"));
            };
            let min_numel = lo.parse().map_err(|_| bad("bad min_numel"))?;
            let max_numel = hi.parse().map_err(|_| bad("bad max_numel"))?;
            if min_numel > max_numel {
                return Err(bad("min_numel exceeds max_numel"));
            }
            buckets.push(ProfileBucket {
                min_numel,
                max_numel,
                strategy: st.parse()?,
            });
        }
        Ok(Self { buckets })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Median wall time of one strategy at one size.
#[derive(Debug, Clone, Copy)]
pub struct ProfileSample {
    pub numel: usize,
    pub strategy: Strategy,
    pub median_ns: u128,
}

/// Times every strategy on a random tensor of each size.
///
/// Every timed run is checked against the sequential result first; a
/// mismatch is reported as an error rather than a timing.
pub fn profile_strategies(sizes: &[usize], repetitions: usize) -> Result<Vec<ProfileSample>> {
    let reps = repetitions.max(3);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut out = Vec::new();
    for &numel in sizes {
        let numel = numel.max(1);
        let x: Vec<f32> = (0..numel).map(|_| rng.random_range(-1.0e3f32..1.0e3)).collect();
        let expected = reduce_sequential(&x, ReduceOp::Min)?;
        for strategy in Strategy::ALL {
            let cfg = ReduceConfig::auto(numel, strategy);
            let mut times = Vec::with_capacity(reps);
            for _ in 0..reps {
                let t = Instant::now();
                let got = reduce(&x, ReduceOp::Min, &cfg)?;
                times.push(t.elapsed().as_nanos());
                if got != expected {
                    return Err(Error::invalid(format!(
                        "{strategy} returned {got}, sequential oracle {expected}"
                    )));
                }
            }
            times.sort_unstable();
            out.push(ProfileSample {
                numel,
                strategy,
                median_ns: times[times.len() / 2],
            });
        }
    }
    Ok(out)
}

/// Picks the fastest strategy per size. Buckets run from just above the
/// previous profiled size up to this one.
pub fn select_from_samples(samples: &[ProfileSample]) -> ProfileTable {
    let mut sizes: Vec<usize> = samples.iter().map(|s| s.numel).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut buckets = Vec::with_capacity(sizes.len());
    let mut lo = 1u64;
    for numel in sizes {
        // Sequential first, so it wins ties.
        let best = Strategy::ALL
            .into_iter()
            .filter_map(|st| {
                samples
                    .iter()
                    .find(|s| s.numel == numel && s.strategy == st)
                    .map(|s| (s.median_ns, st))
            })
            .min_by_key(|&(t, _)| t)
            .map_or(Strategy::Sequential, |(_, st)| st);
        buckets.push(ProfileBucket {
            min_numel: lo,
            max_numel: numel as u64,
            strategy: best,
        });
        lo = numel as u64 + 1;
    }
    ProfileTable { buckets }
}

pub fn profile_select_strategy(sizes: &[usize], repetitions: usize) -> Result<ProfileTable> {
    Ok(select_from_samples(&profile_strategies(sizes, repetitions)?))
}
