//! The storage controller.
//!
//! Before an iteration, moving-average importances are packed greedily into
//! the budgets to get a planned bit-width per activation. During the forward
//! pass every arriving activation is offered to the store: while it does not
//! fit, the tighter of the two budgets picks a tree, and the lowest-density
//! item in that tree gives way — a resident is evicted, while the newcomer
//! is first narrowed (memory-bound only) and finally skipped.

use std::collections::{BTreeMap, HashMap};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::pagestore::{payload_size, ActivationEntry, BudgetState, Density, DualTrees, ForcedAction, PageStore, TreeKind};
use crate::quant::{Bitwidth, ImportanceState, DEFAULT_EMA_DECAY};
use crate::bitcodec::DEFAULT_TILE_ELEMS;
use crate::{ActId, Error, Result};

fn remaining_ratio(budget: f64, used: f64) -> f64 {
    if budget.is_infinite() {
        1.0
    } else if budget <= 0.0 {
        if used > 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    } else {
        (budget - used) / budget
    }
}

fn tighter(b: &BudgetState) -> TreeKind {
    let mem = remaining_ratio(b.mem_budget as f64, b.mem_used as f64);
    let time = remaining_ratio(b.time_budget, b.time_used);
    if mem <= time {
        TreeKind::Mem
    } else {
        TreeKind::Time
    }
}

/// The resource with the smaller remaining fraction of its budget. Ties go
/// to memory.
pub fn tighter_constraint(b: &BudgetState) -> Result<TreeKind> {
    if b.mem_budget == 0 || !(b.time_budget > 0.0) {
        return Err(Error::invalid("budgets must be positive"));
    }
    Ok(tighter(b))
}

/// Maps an activation's density rank (0 = lowest, 1 = highest) to a
/// storage width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Ladder {
    /// Top quartile 8 bits, middle half 4, bottom quartile 2.
    #[default]
    Quartile,
    /// Every activation at one width.
    Fixed(Bitwidth),
}

impl Ladder {
    pub fn choose(self, rank: f64, headroom: u64, fp32_bytes: u64) -> Bitwidth {
        match self {
            Ladder::Quartile => choose_bitwidth(rank, headroom, fp32_bytes),
            Ladder::Fixed(b) => b,
        }
    }
}

impl FromStr for Ladder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quartile" => Ok(Ladder::Quartile),
            _ => {
                let bits: u8 = s.parse().map_err(|_| Error::invalid(format!("unknown ladder `{s}`")))?;
                Ok(Ladder::Fixed(Bitwidth::new(bits)?))
            }
        }
    }
}

/// Default ladder. No headroom stores nothing; headroom for everything at
/// full size stores everything at 8 bits.
pub fn choose_bitwidth(rank: f64, headroom: u64, fp32_bytes: u64) -> Bitwidth {
    if headroom == 0 {
        Bitwidth::SKIP
    } else if headroom >= fp32_bytes || rank >= 0.75 {
        Bitwidth::B8
    } else if rank >= 0.25 {
        Bitwidth::B4
    } else {
        Bitwidth::B2
    }
}

/// Midpoint ranks in `[0, 1]` of `densities`, ascending, ties by position.
fn ranks(densities: &[(Density, ActId)]) -> HashMap<ActId, f64> {
    let mut order: Vec<_> = densities.to_vec();
    order.sort();
    let n = order.len() as f64;
    order
        .iter()
        .enumerate()
        .map(|(i, &(_, id))| (id, (i as f64 + 0.5) / n))
        .collect()
}

/// What the controller knows about one activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationInfo {
    pub act_id: ActId,
    pub numel: u64,
    pub time_cost: f64,
    pub importance: f64,
}

impl ActivationInfo {
    pub fn fp32_bytes(&self) -> u64 {
        4 * self.numel
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Plan {
    pub bitwidths: BTreeMap<ActId, Bitwidth>,
    pub mem_used: u64,
    pub time_used: f64,
}

impl Plan {
    pub fn get(&self, id: ActId) -> Option<Bitwidth> {
        self.bitwidths.get(&id).copied()
    }
}

/// Side-table of virtual residents used by the planner.
struct Virtual {
    trees: DualTrees,
    items: HashMap<ActId, (ActivationInfo, Bitwidth, u64)>,
    state: BudgetState,
}

impl Virtual {
    fn insert(&mut self, info: ActivationInfo, b: Bitwidth, size: u64) {
        let m = Density::of(info.importance, size as f64);
        let t = Density::of(info.importance, info.time_cost);
        self.trees.insert(info.act_id, m, t).expect("unique ids");
        self.items.insert(info.act_id, (info, b, size));
        self.state.mem_used += size;
        self.state.time_used += info.time_cost;
    }

    fn remove(&mut self, id: ActId) -> (ActivationInfo, Bitwidth, u64) {
        self.trees.remove(id);
        let (info, b, size) = self.items.remove(&id).expect("resident");
        self.state.mem_used -= size;
        self.state.time_used -= info.time_cost;
        if self.items.is_empty() {
            self.state.time_used = 0.0;
        }
        (info, b, size)
    }
}

/// Lowest-density resident of `kind`; among equal densities the one with
/// the worse secondary density, then the smaller id.
fn worst(trees: &DualTrees, kind: TreeKind) -> Option<(Density, Density, ActId)> {
    let other = match kind {
        TreeKind::Mem => TreeKind::Time,
        TreeKind::Time => TreeKind::Mem,
    };
    let mut it = trees.tree(kind).keys();
    let &(d, first) = it.next()?;
    let secondary = |id| {
        let (m, t) = trees.keys_of(id).expect("resident");
        if other == TreeKind::Mem {
            m
        } else {
            t
        }
    };
    let mut best = (d, secondary(first), first);
    for &(dd, id) in it {
        if dd != d {
            break;
        }
        let s = secondary(id);
        if s < best.1 {
            best = (d, s, id);
        }
    }
    Some(best)
}

/// Greedy packing of moving-average importances into the budgets.
///
/// Each activation enters at the ladder's width for its density rank; after
/// each entry, while a budget is exceeded, the lowest-density resident of
/// the tighter tree is narrowed one rung (memory) or dropped (time, or
/// already at 2 bits).
pub fn pre_iteration_plan(items: &[ActivationInfo], mem_budget: u64, time_budget: f64, ladder: Ladder, tile_elems: u32) -> Plan {
    let fp32_total: u64 = items.iter().map(ActivationInfo::fp32_bytes).sum();
    let dens: Vec<_> = items
        .iter()
        .map(|i| (Density::of(i.importance, i.fp32_bytes() as f64), i.act_id))
        .collect();
    let rank = ranks(&dens);
    let mut v = Virtual {
        trees: DualTrees::new(),
        items: HashMap::new(),
        state: BudgetState {
            mem_budget,
            mem_used: 0,
            time_budget,
            time_used: 0.0,
        },
    };
    let mut bitwidths = BTreeMap::new();
    for info in items {
        let b = ladder.choose(rank[&info.act_id], mem_budget, fp32_total);
        bitwidths.insert(info.act_id, Bitwidth::SKIP);
        if b == Bitwidth::SKIP {
            continue;
        }
        v.insert(*info, b, payload_size(info.numel, b, tile_elems));
        while !v.state.within() {
            let kind = tighter(&v.state);
            let Some((_, _, id)) = worst(&v.trees, kind) else {
                break;
            };
            let (info, b, _) = v.remove(id);
            if let Some(nb) = b.step_down().filter(|_| kind == TreeKind::Mem) { v.insert(info, nb, payload_size(info.numel, nb, tile_elems)) }
        }
    }
    for (id, (_, b, _)) in &v.items {
        bitwidths.insert(*id, *b);
    }
    Plan {
        bitwidths,
        mem_used: v.state.mem_used,
        time_used: v.state.time_used.max(0.0),
    }
}

/// Narrowed residents and the store's forced actions after a budget change.
pub type BudgetOutcome = (Vec<(ActId, Bitwidth)>, Vec<ForcedAction>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    StoreAt(Bitwidth),
    Skip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub act_id: ActId,
    pub action: Action,
    pub forced_evictions: Vec<ActId>,
    pub forced_shrinks: Vec<(ActId, Bitwidth)>,
}

impl Decision {
    pub fn bitwidth(&self) -> Bitwidth {
        match self.action {
            Action::StoreAt(b) => b,
            Action::Skip => Bitwidth::SKIP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub ladder: Ladder,
    pub tile_elems: u32,
    pub ema_decay: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            ladder: Ladder::Quartile,
            tile_elems: DEFAULT_TILE_ELEMS,
            ema_decay: DEFAULT_EMA_DECAY,
        }
    }
}

/// Per-run controller state: moving averages and the current plan.
#[derive(Debug, Clone, Default)]
pub struct Policy {
    cfg: PolicyConfig,
    averages: HashMap<ActId, ImportanceState>,
    last_seen: BTreeMap<ActId, ActivationInfo>,
    plan: Option<Plan>,
}

impl Policy {
    pub fn new(cfg: PolicyConfig) -> Self {
        Self {
            cfg,
            ..Self::default()
        }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn plan(&self) -> Option<&Plan> {
        self.plan.as_ref()
    }

    pub fn moving_average(&self, id: ActId) -> Option<f64> {
        self.averages.get(&id).map(|s| s.moving_average)
    }

    /// Plans the coming iteration from the moving averages of everything
    /// seen so far. Nothing is planned before the first iteration.
    pub fn begin_iteration(&mut self, store: &PageStore) {
        if self.last_seen.is_empty() {
            self.plan = None;
            return;
        }
        let items: Vec<ActivationInfo> = self
            .last_seen
            .values()
            .map(|i| ActivationInfo {
                importance: self.averages[&i.act_id].moving_average,
                ..*i
            })
            .collect();
        let b = store.budget();
        self.plan = Some(pre_iteration_plan(&items, b.mem_budget, b.time_budget, self.cfg.ladder, self.cfg.tile_elems));
    }

    /// Width for an activation the plan does not cover: ladder choice by its
    /// density rank among the current residents.
    fn unplanned_bitwidth(&self, store: &PageStore, info: &ActivationInfo) -> Bitwidth {
        let d = Density::of(info.importance, info.fp32_bytes() as f64);
        let n = store.len();
        let below = store
            .entries()
            .filter(|e| Density::of(e.importance, 4.0 * e.numel as f64) < d)
            .count();
        let rank = (below as f64 + 0.5) / (n as f64 + 1.0);
        let b = store.budget();
        let headroom = b.mem_budget.saturating_sub(b.mem_used);
        self.cfg.ladder.choose(rank, headroom, info.fp32_bytes())
    }

    /// Offers an activation to the store.
    ///
    /// `encode` produces the payload bytes at the chosen width; it is only
    /// called once the activation is known to fit.
    pub fn on_activation<F>(&mut self, store: &mut PageStore, info: ActivationInfo, encode: F) -> Result<Decision>
    where
        F: FnOnce(Bitwidth) -> Result<Vec<u8>>,
    {
        if !(info.importance >= 0.0) || !(info.time_cost >= 0.0) {
            return Err(Error::invalid(format!(
                "activation {}: importance and time cost must be non-negative",
                info.act_id
            )));
        }
        let state = self
            .averages
            .get(&info.act_id)
            .copied()
            .unwrap_or_else(|| ImportanceState::new(self.cfg.ema_decay))
            .ema_update(info.importance)?;
        self.averages.insert(info.act_id, state);
        self.last_seen.insert(info.act_id, info);

        let mut decision = Decision {
            act_id: info.act_id,
            action: Action::Skip,
            forced_evictions: Vec::new(),
            forced_shrinks: Vec::new(),
        };
        if store.contains(info.act_id) {
            return Err(Error::Duplicate(info.act_id));
        }
        let mut b = match self.plan.as_ref().and_then(|p| p.get(info.act_id)) {
            Some(b) => b,
            None => self.unplanned_bitwidth(store, &info),
        };
        if b == Bitwidth::SKIP {
            return Ok(decision);
        }
        let tile = self.cfg.tile_elems;
        loop {
            let size = payload_size(info.numel, b, tile);
            let bs = store.budget();
            let projected = BudgetState {
                mem_used: bs.mem_used + size,
                time_used: bs.time_used + info.time_cost,
                ..bs
            };
            let placeable = store.can_place(size);
            if projected.within() && placeable {
                break;
            }
            // A page shortfall is a memory problem even if the byte budget holds.
            let kind = if projected.within() { TreeKind::Mem } else { tighter(&projected) };
            let cand = (
                Density::of(info.importance, size as f64),
                Density::of(info.importance, info.time_cost),
            );
            let cand = match kind {
                TreeKind::Mem => cand,
                TreeKind::Time => (cand.1, cand.0),
            };
            match worst(store.trees(), kind) {
                Some((d, s, victim)) if cand > (d, s) => {
                    store.evict(victim)?;
                    decision.forced_evictions.push(victim);
                }
                _ => match b.step_down().filter(|nb| kind == TreeKind::Mem && nb.is_packed()) {
                    Some(nb) => b = nb,
                    None => return Ok(decision),
                },
            }
        }
        let payload = encode(b)?;
        let mut entry = ActivationEntry::new(info.act_id, info.numel, b, payload.len() as u64, info.time_cost, info.importance);
        entry.moving_average = state.moving_average;
        match store.insert(entry, &payload) {
            Ok(_) => decision.action = Action::StoreAt(b),
            Err(Error::NoSpace { .. } | Error::StoreRejected(_)) => {}
            Err(e) => return Err(e),
        }
        Ok(decision)
    }

    /// The backward pass has consumed everything: free all residents.
    pub fn end_iteration(&mut self, store: &mut PageStore) {
        store.release_all();
    }

    /// Applies a new memory budget. Residents over the new budget are first
    /// narrowed (lowest memory density first), then dropped; the store then
    /// releases capacity.
    pub fn set_mem_budget(&self, store: &mut PageStore, new_budget: u64) -> Result<BudgetOutcome> {
        if new_budget < store.step() {
            return Err(Error::invalid(format!(
                "budget {new_budget} is below one step of {}",
                store.step()
            )));
        }
        let mut shrinks = Vec::new();
        let mut actions = Vec::new();
        while store.budget().mem_used > new_budget {
            let (_, _, id) = worst(store.trees(), TreeKind::Mem).ok_or(Error::NothingToEvict)?;
            let b = store.get(id).expect("resident").bitwidth;
            match b.step_down() {
                Some(nb) => {
                    let bytes = store.read_payload(id)?.requantize(nb, self.cfg.tile_elems)?.to_bytes();
                    store.update_size(id, nb, &bytes)?;
                    shrinks.push((id, nb));
                }
                None => {
                    store.evict(id)?;
                    actions.push(ForcedAction::Evicted(id));
                }
            }
        }
        actions.extend(store.resize_budget(new_budget)?);
        Ok((shrinks, actions))
    }

    /// Applies a new time budget, dropping the lowest time-density residents
    /// until it holds.
    pub fn set_time_budget(&self, store: &mut PageStore, new_budget: f64) -> Result<Vec<ActId>> {
        if !(new_budget > 0.0) {
            return Err(Error::invalid("time budget must be positive"));
        }
        store.set_time_budget(new_budget);
        let mut evicted = Vec::new();
        while store.budget().time_used > new_budget {
            let (_, _, id) = worst(store.trees(), TreeKind::Time).ok_or(Error::NothingToEvict)?;
            store.evict(id)?;
            evicted.push(id);
        }
        Ok(evicted)
    }
}
