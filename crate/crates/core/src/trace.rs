//! Workload traces and the replay driver.
//!
//! A trace is JSON-lines, one event per line:
//!
//! ```text
//! {"type":"activation","iter":0,"act_id":3,"numel":65536,"time_cost":65.5,"importance":0.8}
//! {"type":"budget_change","iter":4,"mem_bytes":3145728}
//! {"type":"iter_end","iter":0}
//! ```
//!
//! Replay runs the controller and store in accounting mode: payloads are
//! zero-filled buffers of the exact encoded size, so memory figures are real
//! while no tensor data is needed.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::bitcodec::{self, PackedBuffer, DEFAULT_TILE_ELEMS};
use crate::pagestore::{PageStore, DEFAULT_PAGE_SIZE, DEFAULT_STEP};
use crate::policy::{ActivationInfo, Decision, Ladder, Policy, PolicyConfig};
use crate::quant::{qparams_from_range, Bitwidth, DEFAULT_EMA_DECAY};
use crate::{ActId, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceEvent {
    Activation {
        iter: u64,
        act_id: ActId,
        numel: u64,
        time_cost: f64,
        importance: f64,
    },
    BudgetChange {
        iter: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        mem_bytes: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        time_units: Option<f64>,
    },
    IterEnd {
        iter: u64,
    },
}

impl TraceEvent {
    pub fn iter(&self) -> u64 {
        match self {
            TraceEvent::Activation { iter, .. } | TraceEvent::BudgetChange { iter, .. } | TraceEvent::IterEnd { iter } => *iter,
        }
    }
}

/// Parses and validates a JSON-lines trace. Blank lines are ignored; errors
/// carry the 1-based line number.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>> {
    let mut events = Vec::new();
    let mut last_iter = 0;
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::TraceParse { line: line_no, msg };
        let ev: TraceEvent = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if ev.iter() < last_iter {
            return Err(err(format!("iteration {} after {last_iter}", ev.iter())));
        }
        if ev.iter() != last_iter {
            ids.clear();
        }
        last_iter = ev.iter();
        match &ev {
            TraceEvent::Activation {
                act_id,
                numel,
                time_cost,
                importance,
                ..
            } => {
                if !ids.insert(*act_id) {
                    return Err(err(format!("activation {act_id} repeated within iteration")));
                }
                if *numel == 0 {
                    return Err(err("numel must be positive".into()));
                }
                if !(*time_cost >= 0.0 && time_cost.is_finite()) || !(*importance >= 0.0 && importance.is_finite()) {
                    return Err(err("time_cost and importance must be finite and non-negative".into()));
                }
            }
            TraceEvent::BudgetChange { mem_bytes, time_units, .. } => {
                if mem_bytes.is_none() && time_units.is_none() {
                    return Err(err("budget_change needs mem_bytes or time_units".into()));
                }
                if time_units.is_some_and(|t| !(t > 0.0)) {
                    return Err(err("time_units must be positive".into()));
                }
            }
            TraceEvent::IterEnd { .. } => ids.clear(),
        }
        events.push(ev);
    }
    Ok(events)
}

pub fn to_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for ev in events {
        out.push_str(&serde_json::to_string(ev).expect("trace events serialize"));
        out.push('\n');
    }
    out
}

/// Per-iteration fp32 bytes of the activations in a trace (first iteration).
pub fn fp32_bytes_per_iter(events: &[TraceEvent]) -> u64 {
    let first = events.first().map(TraceEvent::iter).unwrap_or(0);
    events
        .iter()
        .filter_map(|e| match e {
            TraceEvent::Activation { iter, numel, .. } if *iter == first => Some(4 * numel),
            _ => None,
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayConfig {
    pub mem_budget: u64,
    pub time_budget: f64,
    pub page_size: u64,
    /// Arena growth step; defaults to the smaller of 100 MiB and the budget.
    pub step: Option<u64>,
    pub tile_elems: u32,
    pub ladder: Ladder,
    /// Run the full store consistency check after every event.
    pub check_invariants: bool,
}

impl ReplayConfig {
    pub fn new(mem_budget: u64) -> Self {
        Self {
            mem_budget,
            time_budget: f64::INFINITY,
            page_size: DEFAULT_PAGE_SIZE,
            step: None,
            tile_elems: DEFAULT_TILE_ELEMS,
            ladder: Ladder::Quartile,
            check_invariants: false,
        }
    }

    pub fn step_bytes(&self) -> u64 {
        self.step
            .unwrap_or_else(|| DEFAULT_STEP.min(self.mem_budget / self.page_size * self.page_size))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterMetrics {
    pub iter: u64,
    pub mem_used: u64,
    pub capacity: u64,
    pub budget: u64,
    /// Bytes the iteration's activations take at fp32.
    pub fp32_bytes: u64,
    pub evictions: u64,
    pub shrinks: u64,
    pub time_used: f64,
}

impl IterMetrics {
    /// fp32 bytes over stored bytes; infinite when nothing was stored.
    pub fn ratio(&self) -> f64 {
        if self.mem_used == 0 {
            f64::INFINITY
        } else {
            self.fp32_bytes as f64 / self.mem_used as f64
        }
    }
}

pub const METRICS_CSV_HEADER: &str = "iter,mem_used,capacity,budget,ratio,evictions,shrinks,time_used";

pub fn metrics_csv(metrics: &[IterMetrics]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for m in metrics {
        let ratio = m.ratio();
        let ratio = if ratio.is_finite() { format!("{ratio:.4}") } else { "inf".into() };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.4}",
            m.iter, m.mem_used, m.capacity, m.budget, ratio, m.evictions, m.shrinks, m.time_used
        );
    }
    out
}

/// One line of the decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub iter: u64,
    #[serde(flatten)]
    pub decision: Decision,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayReport {
    pub metrics: Vec<IterMetrics>,
    pub decisions: Vec<DecisionRecord>,
}

impl ReplayReport {
    /// Total fp32 bytes over total stored bytes across all iterations.
    pub fn overall_ratio(&self) -> f64 {
        let fp32: u64 = self.metrics.iter().map(|m| m.fp32_bytes).sum();
        let used: u64 = self.metrics.iter().map(|m| m.mem_used).sum();
        if used == 0 {
            f64::INFINITY
        } else {
            fp32 as f64 / used as f64
        }
    }

    pub fn decision_log(&self) -> String {
        let mut out = String::new();
        for d in &self.decisions {
            out.push_str(&serde_json::to_string(d).expect("decisions serialize"));
            out.push('\n');
        }
        out
    }
}

/// Zero-filled payload of the exact size stored at `b`.
pub fn accounting_payload(numel: u64, b: Bitwidth, tile_elems: u32) -> Result<Vec<u8>> {
    if b == Bitwidth::FULL {
        return Ok(vec![0; 4 * numel as usize]);
    }
    let buf = PackedBuffer::zeroed(numel, qparams_from_range(0.0, 0.0, b), tile_elems)?;
    Ok(bitcodec::serialize(&buf))
}

/// Runs the controller over a trace.
///
/// Budget safety is checked after every event; a breach is reported as
/// [`Error::InvariantViolation`].
pub fn replay(events: &[TraceEvent], cfg: &ReplayConfig) -> Result<ReplayReport> {
    let mut store = PageStore::new(cfg.mem_budget, cfg.page_size, cfg.step_bytes())?.with_time_budget(cfg.time_budget);
    let mut policy = Policy::new(PolicyConfig {
        ladder: cfg.ladder,
        tile_elems: cfg.tile_elems,
        ema_decay: DEFAULT_EMA_DECAY,
    });
    let mut report = ReplayReport::default();
    let mut in_iter = false;
    let mut fp32 = 0u64;
    let mut base = store.stats();
    for ev in events {
        match *ev {
            TraceEvent::Activation {
                iter,
                act_id,
                numel,
                time_cost,
                importance,
            } => {
                if !in_iter {
                    policy.begin_iteration(&store);
                    in_iter = true;
                }
                let info = ActivationInfo {
                    act_id,
                    numel,
                    time_cost,
                    importance,
                };
                let tile = cfg.tile_elems;
                let decision = policy.on_activation(&mut store, info, |b| accounting_payload(numel, b, tile))?;
                fp32 += 4 * numel;
                report.decisions.push(DecisionRecord { iter, decision });
            }
            TraceEvent::BudgetChange {
                mem_bytes, time_units, ..
            } => {
                if let Some(t) = time_units {
                    policy.set_time_budget(&mut store, t)?;
                }
                if let Some(m) = mem_bytes {
                    policy.set_mem_budget(&mut store, m)?;
                }
            }
            TraceEvent::IterEnd { iter } => {
                let st = store.stats();
                let b = store.budget();
                report.metrics.push(IterMetrics {
                    iter,
                    mem_used: st.mem_used,
                    capacity: st.capacity,
                    budget: st.budget,
                    fp32_bytes: fp32,
                    evictions: st.evictions - base.evictions,
                    shrinks: st.shrinks - base.shrinks,
                    time_used: b.time_used,
                });
                policy.end_iteration(&mut store);
                base = store.stats();
                fp32 = 0;
                in_iter = false;
            }
        }
        let b = store.budget();
        if !b.within() {
            return Err(Error::InvariantViolation(format!(
                "iteration {}: mem {}/{} time {}/{}",
                ev.iter(),
                b.mem_used,
                b.mem_budget,
                b.time_used,
                b.time_budget
            )));
        }
        if cfg.check_invariants {
            store.check_invariants().map_err(Error::InvariantViolation)?;
        }
    }
    Ok(report)
}

/// Synthetic workloads built from published layer shapes, with randomized
/// importances. Not measurements of any real model.
pub mod synth {
    use super::*;

    /// Saved activations of a CIFAR-style ResNet-18 (3x32x32 input):
    /// 3 for the stem, 6 per basic block, 1 per downsampling shortcut.
    pub fn resnet18_shapes(batch: u64) -> Vec<u64> {
        let mut shapes = vec![3 * 32 * 32, 64 * 32 * 32, 64 * 32 * 32];
        let stages = [(64u64, 32u64), (128, 16), (256, 8), (512, 4)];
        let mut prev = (64u64, 32u64);
        for (s, &(c, hw)) in stages.iter().enumerate() {
            for block in 0..2 {
                let input = if block == 0 { prev.0 * prev.1 * prev.1 } else { c * hw * hw };
                let out = c * hw * hw;
                // conv1 in, bn1 in, relu1 out, bn2 in, residual sum, relu2 out
                shapes.extend([input, out, out, out, out, out]);
                if block == 0 && s > 0 {
                    shapes.push(out);
                }
            }
            prev = (c, hw);
        }
        shapes.iter().map(|n| n * batch).collect()
    }

    /// Saved activations of a small encoder-only transformer, 10 per layer.
    pub fn transformer_shapes(batch: u64, seq: u64, hidden: u64, heads: u64, layers: u64) -> Vec<u64> {
        let tok = batch * seq * hidden;
        let scores = batch * heads * seq * seq;
        let per_layer = [tok, tok, scores, scores, tok, tok, tok, tok, 4 * tok, 4 * tok];
        (0..layers).flat_map(|_| per_layer).collect()
    }

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct SynthConfig {
        pub iterations: u64,
        pub seed: u64,
        /// Spread of the per-activation base importance (log-space sigma).
        pub spread: f64,
        /// Per-iteration multiplicative jitter (log-space sigma).
        pub jitter: f64,
        /// Backward time units per element.
        pub time_per_elem: f64,
    }

    impl Default for SynthConfig {
        fn default() -> Self {
            Self {
                iterations: 10,
                seed: 42,
                spread: 1.0,
                jitter: 0.1,
                time_per_elem: 1e-3,
            }
        }
    }

    /// Activation events for `shapes` over several iterations, with optional
    /// memory budget changes applied at the start of the given iterations.
    pub fn trace(shapes: &[u64], cfg: &SynthConfig, budget_changes: &[(u64, u64)]) -> Vec<TraceEvent> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let base = LogNormal::new(0.0, cfg.spread).expect("valid spread");
        let jitter = LogNormal::new(0.0, cfg.jitter).expect("valid jitter");
        let bases: Vec<f64> = shapes.iter().map(|&n| base.sample(&mut rng) * (n as f64).sqrt()).collect();
        let mut events = Vec::new();
        for iter in 0..cfg.iterations {
            for &(at, mem) in budget_changes {
                if at == iter {
                    events.push(TraceEvent::BudgetChange {
                        iter,
                        mem_bytes: Some(mem),
                        time_units: None,
                    });
                }
            }
            for (id, (&numel, &b)) in shapes.iter().zip(&bases).enumerate() {
                let importance = round6(b * jitter.sample(&mut rng));
                events.push(TraceEvent::Activation {
                    iter,
                    act_id: id as ActId,
                    numel,
                    time_cost: round6(numel as f64 * cfg.time_per_elem),
                    importance,
                });
            }
            events.push(TraceEvent::IterEnd { iter });
        }
        events
    }

    fn round6(v: f64) -> f64 {
        (v * 1e6).round() / 1e6
    }

    pub fn resnet18_like() -> Vec<TraceEvent> {
        trace(&resnet18_shapes(6), &SynthConfig::default(), &[])
    }

    pub fn transformer_like() -> Vec<TraceEvent> {
        trace(&transformer_shapes(4, 128, 256, 4, 4), &SynthConfig::default(), &[])
    }
}
