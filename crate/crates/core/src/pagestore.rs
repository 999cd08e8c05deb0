//! Budgeted, page-granular activation arena.
//!
//! The arena is one contiguous byte block grown and shrunk in fixed steps.
//! It is divided into pages; an activation occupies an ordered list of pages
//! (not necessarily adjacent), chosen first-fit. Residency is indexed by two
//! red-black trees: one ordered by importance per byte, one by importance
//! per unit of backward time. The lowest key in either tree is the next
//! eviction candidate for that resource.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::bitcodec::{self, PackedBuffer};
use crate::quant::Bitwidth;
use crate::rbtree::RbTree;
use crate::{ActId, Error, Result};

pub const DEFAULT_PAGE_SIZE: u64 = 4096;
pub const DEFAULT_STEP: u64 = 100 * 1024 * 1024;

/// Importance per unit of cost, totally ordered.
#[derive(Debug, Clone, Copy)]
pub struct Density(pub f64);

impl Density {
    /// `importance / cost`; zero-cost items get `+inf` and are never the
    /// cheapest thing to drop for that resource.
    pub fn of(importance: f64, cost: f64) -> Self {
        if cost > 0.0 {
            Density(importance / cost)
        } else {
            Density(f64::INFINITY)
        }
    }
}

impl PartialEq for Density {
    fn eq(&self, other: &Self) -> bool {
        self.0.total_cmp(&other.0).is_eq()
    }
}

impl Eq for Density {}

impl PartialOrd for Density {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Density {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TreeKind {
    Mem,
    Time,
}

pub type TreeKey = (Density, ActId);

/// The two residency indexes, always updated together.
#[derive(Debug, Clone, Default)]
pub struct DualTrees {
    mem: RbTree<TreeKey, ()>,
    time: RbTree<TreeKey, ()>,
    keys: HashMap<ActId, (Density, Density)>,
}

impl DualTrees {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn contains(&self, id: ActId) -> bool {
        self.keys.contains_key(&id)
    }

    pub fn insert(&mut self, id: ActId, mem: Density, time: Density) -> Result<()> {
        if self.keys.contains_key(&id) {
            return Err(Error::Duplicate(id));
        }
        self.mem.insert((mem, id), ());
        self.time.insert((time, id), ());
        self.keys.insert(id, (mem, time));
        Ok(())
    }

    pub fn remove(&mut self, id: ActId) -> Option<(Density, Density)> {
        let (mem, time) = self.keys.remove(&id)?;
        self.mem.remove(&(mem, id));
        self.time.remove(&(time, id));
        Some((mem, time))
    }

    /// Replaces both keys of a present id.
    pub fn rekey(&mut self, id: ActId, mem: Density, time: Density) -> Result<()> {
        self.remove(id).ok_or(Error::NotFound(id))?;
        self.insert(id, mem, time)
    }

    pub fn keys_of(&self, id: ActId) -> Option<(Density, Density)> {
        self.keys.get(&id).copied()
    }

    pub fn tree(&self, kind: TreeKind) -> &RbTree<TreeKey, ()> {
        match kind {
            TreeKind::Mem => &self.mem,
            TreeKind::Time => &self.time,
        }
    }

    /// Lowest key in the tree: the eviction candidate.
    pub fn min(&self, kind: TreeKind) -> Option<TreeKey> {
        self.tree(kind).first().map(|(k, _)| *k)
    }

    /// Ids in ascending key order.
    pub fn order(&self, kind: TreeKind) -> Vec<ActId> {
        self.tree(kind).keys().map(|&(_, id)| id).collect()
    }

    pub fn clear(&mut self) {
        self.mem.clear();
        self.time.clear();
        self.keys.clear();
    }

    pub fn check_invariants(&self) -> Result<(), String> {
        self.mem.check_invariants()?;
        self.time.check_invariants()?;
        if self.mem.len() != self.keys.len() || self.time.len() != self.keys.len() {
            return Err("tree sizes disagree".into());
        }
        for (&id, &(m, t)) in &self.keys {
            if !self.mem.contains_key(&(m, id)) || !self.time.contains_key(&(t, id)) {
                return Err(format!("activation {id} missing from a tree"));
            }
        }
        Ok(())
    }
}

/// Stored bytes of an activation at a given bit-width.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Packed(PackedBuffer),
    Full(Vec<f32>),
}

impl Payload {
    /// Quantizes `x` at `b` (raw floats at 32).
    pub fn encode(x: &[f32], b: Bitwidth, tile_elems: u32) -> Result<Self> {
        match b.bits() {
            32 => Ok(Payload::Full(x.to_vec())),
            _ => Ok(Payload::Packed(bitcodec::compress(x, b, tile_elems)?)),
        }
    }

    pub fn decode(&self) -> Result<Vec<f32>> {
        match self {
            Payload::Packed(buf) => bitcodec::decompress(buf),
            Payload::Full(v) => Ok(v.clone()),
        }
    }

    pub fn bitwidth(&self) -> Bitwidth {
        match self {
            Payload::Packed(buf) => buf.bitwidth(),
            Payload::Full(_) => Bitwidth::FULL,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Payload::Packed(buf) => bitcodec::serialize(buf),
            Payload::Full(v) => v.iter().flat_map(|f| f.to_le_bytes()).collect(),
        }
    }

    pub fn from_bytes(bytes: &[u8], b: Bitwidth) -> Result<Self> {
        match b.bits() {
            32 => {
                if !bytes.len().is_multiple_of(4) {
                    return Err(Error::corrupt("raw payload is not a whole number of floats"));
                }
                Ok(Payload::Full(
                    bytes
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ))
            }
            _ => {
                let buf = bitcodec::deserialize(bytes)?;
                if buf.bitwidth() != b {
                    return Err(Error::corrupt(format!(
                        "payload holds {} bits, entry says {b}",
                        buf.bitwidth()
                    )));
                }
                Ok(Payload::Packed(buf))
            }
        }
    }

    /// Re-encodes at a narrower width.
    pub fn requantize(&self, b: Bitwidth, tile_elems: u32) -> Result<Self> {
        Payload::encode(&self.decode()?, b, tile_elems)
    }
}

/// Serialized size of `numel` elements stored at `b`.
pub fn payload_size(numel: u64, b: Bitwidth, tile_elems: u32) -> u64 {
    match b.bits() {
        0 => 0,
        32 => 4 * numel,
        _ => bitcodec::encoded_len(numel, b, tile_elems),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationEntry {
    pub act_id: ActId,
    pub numel: u64,
    pub bitwidth: Bitwidth,
    pub size_bytes: u64,
    pub time_cost: f64,
    /// Importance the tree keys are computed from.
    pub importance: f64,
    pub moving_average: f64,
    pub page_span: Vec<u32>,
}

impl ActivationEntry {
    pub fn new(
        act_id: ActId,
        numel: u64,
        bitwidth: Bitwidth,
        size_bytes: u64,
        time_cost: f64,
        importance: f64,
    ) -> Self {
        Self {
            act_id,
            numel,
            bitwidth,
            size_bytes,
            time_cost,
            importance,
            moving_average: importance,
            page_span: Vec::new(),
        }
    }

    pub fn mem_density(&self) -> Density {
        Density::of(self.importance, self.size_bytes as f64)
    }

    pub fn time_density(&self) -> Density {
        Density::of(self.importance, self.time_cost)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetState {
    pub mem_budget: u64,
    pub mem_used: u64,
    pub time_budget: f64,
    pub time_used: f64,
}

impl BudgetState {
    pub fn within(&self) -> bool {
        self.mem_used <= self.mem_budget && self.time_used <= self.time_budget
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StoreStats {
    pub mem_used: u64,
    pub capacity: u64,
    pub budget: u64,
    pub free_pages: usize,
    pub internal_frag_bytes: u64,
    pub resident: usize,
    pub evictions: u64,
    pub shrinks: u64,
    pub relocations: u64,
}

/// Side effects of a budget change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ForcedAction {
    Evicted(ActId),
    Relocated { act_id: ActId, from: u32, to: u32 },
    CapacityReleased { bytes: u64 },
}

/// First-fit page selection.
///
/// Returns the lowest-indexed run of `n` contiguous free pages if there is
/// one, otherwise the `n` lowest-indexed free pages.
pub fn first_fit(free: &[bool], n: usize) -> Result<Vec<u32>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut run_start = 0;
    let mut run = 0;
    for (i, &f) in free.iter().enumerate() {
        if f {
            if run == 0 {
                run_start = i;
            }
            run += 1;
            if run == n {
                return Ok((run_start as u32..=i as u32).collect());
            }
        } else {
            run = 0;
        }
    }
    let scattered: Vec<u32> = free
        .iter()
        .enumerate()
        .filter(|(_, &f)| f)
        .map(|(i, _)| i as u32)
        .take(n)
        .collect();
    if scattered.len() == n {
        Ok(scattered)
    } else {
        Err(Error::NoSpace {
            needed: n,
            free: scattered.len(),
        })
    }
}

/// Contiguous backing block, grown and released in whole steps.
#[derive(Debug, Clone)]
struct Arena {
    page_size: u64,
    step: u64,
    capacity: u64,
    bytes: Vec<u8>,
    free: Vec<bool>,
    owner: Vec<Option<ActId>>,
}

impl Arena {
    fn pages(&self) -> usize {
        self.free.len()
    }

    fn grow(&mut self) {
        self.capacity += self.step;
        let pages = (self.capacity / self.page_size) as usize;
        self.bytes.resize(self.capacity as usize, 0);
        self.free.resize(pages, true);
        self.owner.resize(pages, None);
    }

    fn truncate_step(&mut self) {
        self.capacity -= self.step;
        let pages = (self.capacity / self.page_size) as usize;
        debug_assert!(self.free[pages..].iter().all(|&f| f));
        self.bytes.truncate(self.capacity as usize);
        self.bytes.shrink_to_fit();
        self.free.truncate(pages);
        self.owner.truncate(pages);
    }

    fn page_range(&self, page: u32) -> std::ops::Range<usize> {
        let lo = page as usize * self.page_size as usize;
        lo..lo + self.page_size as usize
    }

    fn write(&mut self, span: &[u32], payload: &[u8]) {
        for (&p, chunk) in span.iter().zip(payload.chunks(self.page_size as usize)) {
            let r = self.page_range(p);
            self.bytes[r.start..r.start + chunk.len()].copy_from_slice(chunk);
        }
    }

    fn read(&self, span: &[u32], len: u64) -> Vec<u8> {
        let mut out = Vec::with_capacity(len as usize);
        let mut left = len as usize;
        for &p in span {
            let r = self.page_range(p);
            let take = left.min(r.len());
            out.extend_from_slice(&self.bytes[r.start..r.start + take]);
            left -= take;
        }
        out
    }

    fn claim(&mut self, span: &[u32], id: ActId) {
        for &p in span {
            debug_assert!(self.free[p as usize]);
            self.free[p as usize] = false;
            self.owner[p as usize] = Some(id);
        }
    }

    fn release(&mut self, span: &[u32]) {
        for &p in span {
            self.free[p as usize] = true;
            self.owner[p as usize] = None;
        }
    }
}

/// The activation store: arena, page table, dual trees and budgets.
#[derive(Debug, Clone)]
pub struct PageStore {
    arena: Arena,
    entries: BTreeMap<ActId, ActivationEntry>,
    trees: DualTrees,
    budget: BudgetState,
    evictions: u64,
    shrinks: u64,
    relocations: u64,
}

impl PageStore {
    /// Starts with one step of capacity; grows on demand up to the budget.
    pub fn new(budget_bytes: u64, page_size: u64, step_bytes: u64) -> Result<Self> {
        if page_size == 0 || step_bytes == 0 {
            return Err(Error::invalid("page size and step must be positive"));
        }
        if !step_bytes.is_multiple_of(page_size) {
            return Err(Error::invalid(format!(
                "page size {page_size} does not divide step {step_bytes}"
            )));
        }
        if step_bytes > budget_bytes {
            return Err(Error::invalid(format!(
                "step {step_bytes} exceeds budget {budget_bytes}"
            )));
        }
        let mut arena = Arena {
            page_size,
            step: step_bytes,
            capacity: 0,
            bytes: Vec::new(),
            free: Vec::new(),
            owner: Vec::new(),
        };
        arena.grow();
        Ok(Self {
            arena,
            entries: BTreeMap::new(),
            trees: DualTrees::new(),
            budget: BudgetState {
                mem_budget: budget_bytes,
                mem_used: 0,
                time_budget: f64::INFINITY,
                time_used: 0.0,
            },
            evictions: 0,
            shrinks: 0,
            relocations: 0,
        })
    }

    pub fn with_time_budget(mut self, time_budget: f64) -> Self {
        self.budget.time_budget = time_budget;
        self
    }

    pub fn page_size(&self) -> u64 {
        self.arena.page_size
    }

    pub fn step(&self) -> u64 {
        self.arena.step
    }

    pub fn capacity(&self) -> u64 {
        self.arena.capacity
    }

    pub fn budget(&self) -> BudgetState {
        self.budget
    }

    /// Capacity the arena may grow to under the current budget.
    pub fn max_capacity(&self) -> u64 {
        self.budget.mem_budget / self.arena.step * self.arena.step
    }

    pub fn pages_for(&self, size_bytes: u64) -> usize {
        size_bytes.div_ceil(self.arena.page_size) as usize
    }

    pub fn free_pages(&self) -> usize {
        self.arena.free.iter().filter(|&&f| f).count()
    }

    /// Free pages now plus pages that growth could still add.
    pub fn placeable_pages(&self) -> usize {
        let growable = (self.max_capacity().saturating_sub(self.arena.capacity) / self.arena.page_size) as usize;
        self.free_pages() + growable
    }

    pub fn can_place(&self, size_bytes: u64) -> bool {
        self.pages_for(size_bytes) <= self.placeable_pages()
    }

    pub fn trees(&self) -> &DualTrees {
        &self.trees
    }

    pub fn get(&self, id: ActId) -> Option<&ActivationEntry> {
        self.entries.get(&id)
    }

    pub fn contains(&self, id: ActId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &ActivationEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn set_time_budget(&mut self, time_budget: f64) {
        self.budget.time_budget = time_budget;
    }

    /// Copies `payload` into first-fit pages and indexes the activation.
    ///
    /// Grows the arena one step at a time while pages are short and the
    /// budget allows. Fails with `StoreRejected` when the activation would
    /// push either budget over, and `NoSpace` when pages run out.
    pub fn insert(&mut self, mut entry: ActivationEntry, payload: &[u8]) -> Result<Vec<u32>> {
        let id = entry.act_id;
        if self.entries.contains_key(&id) {
            return Err(Error::Duplicate(id));
        }
        if payload.len() as u64 != entry.size_bytes {
            return Err(Error::invalid(format!(
                "payload of {} bytes for an entry of {} bytes",
                payload.len(),
                entry.size_bytes
            )));
        }
        if self.budget.mem_used + entry.size_bytes > self.budget.mem_budget
            || self.budget.time_used + entry.time_cost > self.budget.time_budget
        {
            return Err(Error::StoreRejected(id));
        }
        let n = self.pages_for(entry.size_bytes);
        let span = loop {
            match first_fit(&self.arena.free, n) {
                Ok(span) => break span,
                Err(e) => {
                    if self.arena.capacity + self.arena.step <= self.max_capacity() {
                        self.arena.grow();
                    } else {
                        return Err(e);
                    }
                }
            }
        };
        self.arena.claim(&span, id);
        self.arena.write(&span, payload);
        entry.page_span = span.clone();
        self.trees.insert(id, entry.mem_density(), entry.time_density())?;
        self.budget.mem_used += entry.size_bytes;
        self.budget.time_used += entry.time_cost;
        self.entries.insert(id, entry);
        Ok(span)
    }

    pub fn read(&self, id: ActId) -> Result<Vec<u8>> {
        let e = self.entries.get(&id).ok_or(Error::NotFound(id))?;
        Ok(self.arena.read(&e.page_span, e.size_bytes))
    }

    pub fn read_payload(&self, id: ActId) -> Result<Payload> {
        let e = self.entries.get(&id).ok_or(Error::NotFound(id))?;
        Payload::from_bytes(&self.arena.read(&e.page_span, e.size_bytes), e.bitwidth)
    }

    fn remove(&mut self, id: ActId) -> Result<ActivationEntry> {
        let e = self.entries.remove(&id).ok_or(Error::NotFound(id))?;
        self.arena.release(&e.page_span);
        self.trees.remove(id);
        self.budget.mem_used -= e.size_bytes;
        self.budget.time_used -= e.time_cost;
        if self.entries.is_empty() {
            // Avoid drift from repeated float subtraction.
            self.budget.time_used = 0.0;
        }
        Ok(e)
    }

    /// Drops a resident activation under budget pressure.
    pub fn evict(&mut self, id: ActId) -> Result<u64> {
        let e = self.remove(id)?;
        self.evictions += 1;
        Ok(e.size_bytes)
    }

    /// Removes an activation whose use is finished (not counted as eviction).
    pub fn release(&mut self, id: ActId) -> Result<ActivationEntry> {
        self.remove(id)
    }

    /// Releases every resident activation; capacity is kept.
    pub fn release_all(&mut self) {
        let ids: Vec<ActId> = self.entries.keys().copied().collect();
        for id in ids {
            self.remove(id).expect("resident");
        }
    }

    /// Replaces an activation's payload with a narrower encoding, keeping
    /// the leading pages of its span and freeing the rest.
    pub fn update_size(&mut self, id: ActId, bitwidth: Bitwidth, payload: &[u8]) -> Result<Vec<u32>> {
        let e = self.entries.get(&id).ok_or(Error::NotFound(id))?;
        if e.bitwidth.step_down().is_none() {
            return Err(Error::MustEvict(id));
        }
        if bitwidth >= e.bitwidth || !bitwidth.is_packed() {
            return Err(Error::invalid(format!(
                "cannot shrink activation {id} from {} to {bitwidth} bits",
                e.bitwidth
            )));
        }
        let new_size = payload.len() as u64;
        let keep = self.pages_for(new_size);
        if keep > e.page_span.len() {
            return Err(Error::invalid("narrower payload needs more pages"));
        }
        let mut e = self.entries.remove(&id).expect("resident");
        let surplus = e.page_span.split_off(keep);
        self.arena.release(&surplus);
        self.arena.write(&e.page_span, payload);
        self.budget.mem_used = self.budget.mem_used - e.size_bytes + new_size;
        e.size_bytes = new_size;
        e.bitwidth = bitwidth;
        self.trees.rekey(id, e.mem_density(), e.time_density())?;
        let span = e.page_span.clone();
        self.entries.insert(id, e);
        self.shrinks += 1;
        Ok(span)
    }

    /// Sets the importance used for the tree keys.
    pub fn update_importance(&mut self, id: ActId, importance: f64, moving_average: f64) -> Result<()> {
        let e = self.entries.get_mut(&id).ok_or(Error::NotFound(id))?;
        e.importance = importance;
        e.moving_average = moving_average;
        let (m, t) = (e.mem_density(), e.time_density());
        self.trees.rekey(id, m, t)
    }

    /// Lowest-density resident in the given tree; ties go to the smaller id.
    pub fn select_victim(&self, kind: TreeKind) -> Result<ActId> {
        self.trees.min(kind).map(|(_, id)| id).ok_or(Error::NothingToEvict)
    }

    /// Applies a new memory budget.
    ///
    /// Raising the budget only lifts the growth ceiling. Lowering it evicts
    /// lowest-density activations until usage fits, then releases capacity
    /// one step at a time: pages in the released step are moved into free
    /// pages below it, evicting further activations if the survivors no
    /// longer fit.
    pub fn resize_budget(&mut self, new_budget: u64) -> Result<Vec<ForcedAction>> {
        if new_budget < self.arena.step {
            return Err(Error::invalid(format!(
                "budget {new_budget} is below one step of {}",
                self.arena.step
            )));
        }
        self.budget.mem_budget = new_budget;
        let mut actions = Vec::new();
        while self.budget.mem_used > new_budget {
            let victim = self.select_victim(TreeKind::Mem)?;
            self.evict(victim)?;
            actions.push(ForcedAction::Evicted(victim));
        }
        let target = self.max_capacity();
        while self.arena.capacity > target {
            let keep_pages = ((self.arena.capacity - self.arena.step) / self.arena.page_size) as usize;
            while self.arena.pages() - self.free_pages() > keep_pages {
                let victim = self.select_victim(TreeKind::Mem)?;
                self.evict(victim)?;
                actions.push(ForcedAction::Evicted(victim));
            }
            for page in keep_pages..self.arena.pages() {
                let Some(id) = self.arena.owner[page] else {
                    continue;
                };
                let to = self.arena.free[..keep_pages]
                    .iter()
                    .position(|&f| f)
                    .expect("survivors fit below the released step");
                self.move_page(id, page as u32, to as u32);
                actions.push(ForcedAction::Relocated {
                    act_id: id,
                    from: page as u32,
                    to: to as u32,
                });
            }
            self.arena.truncate_step();
            actions.push(ForcedAction::CapacityReleased {
                bytes: self.arena.step,
            });
        }
        Ok(actions)
    }

    fn move_page(&mut self, id: ActId, from: u32, to: u32) {
        let src = self.arena.page_range(from);
        let dst = self.arena.page_range(to);
        self.arena.bytes.copy_within(src, dst.start);
        self.arena.release(&[from]);
        self.arena.claim(&[to], id);
        let e = self.entries.get_mut(&id).expect("resident");
        let slot = e.page_span.iter().position(|&p| p == from).expect("page in span");
        e.page_span[slot] = to;
        self.relocations += 1;
    }

    pub fn stats(&self) -> StoreStats {
        let page = self.arena.page_size;
        StoreStats {
            mem_used: self.budget.mem_used,
            capacity: self.arena.capacity,
            budget: self.budget.mem_budget,
            free_pages: self.free_pages(),
            internal_frag_bytes: self
                .entries
                .values()
                .map(|e| e.page_span.len() as u64 * page - e.size_bytes)
                .sum(),
            resident: self.entries.len(),
            evictions: self.evictions,
            shrinks: self.shrinks,
            relocations: self.relocations,
        }
    }

    /// Exhaustive consistency check, for tests and replay assertions.
    pub fn check_invariants(&self) -> Result<(), String> {
        self.trees.check_invariants()?;
        if self.trees.len() != self.entries.len() {
            return Err("trees and page table disagree on residency".into());
        }
        let pages = self.arena.pages();
        if pages as u64 * self.arena.page_size != self.arena.capacity
            || !self.arena.capacity.is_multiple_of(self.arena.step)
        {
            return Err("capacity is not page and step aligned".into());
        }
        let mut seen = vec![false; pages];
        let (mut mem, mut time) = (0u64, 0.0f64);
        for e in self.entries.values() {
            if e.page_span.len() != self.pages_for(e.size_bytes) {
                return Err(format!("activation {} has a mis-sized span", e.act_id));
            }
            if self.trees.keys_of(e.act_id) != Some((e.mem_density(), e.time_density())) {
                return Err(format!("activation {} has stale tree keys", e.act_id));
            }
            for &p in &e.page_span {
                let p = p as usize;
                if p >= pages || seen[p] || self.arena.free[p] || self.arena.owner[p] != Some(e.act_id) {
                    return Err(format!("page {p} is double-booked or marked free"));
                }
                seen[p] = true;
            }
            mem += e.size_bytes;
            time += e.time_cost;
        }
        if seen.iter().zip(&self.arena.free).any(|(&s, &f)| s == f) {
            return Err("free map and spans do not partition the arena".into());
        }
        if mem != self.budget.mem_used {
            return Err(format!("mem_used {} != sum {mem}", self.budget.mem_used));
        }
        if (time - self.budget.time_used).abs() > 1e-6 * time.abs().max(1.0) {
            return Err(format!("time_used {} != sum {time}", self.budget.time_used));
        }
        Ok(())
    }

    /// Debug dump: header, page table, then the raw arena bytes.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(SNAPSHOT_MAGIC)?;
        w.write_all(&[SNAPSHOT_VERSION])?;
        for v in [
            self.arena.page_size,
            self.arena.step,
            self.arena.capacity,
            self.budget.mem_budget,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&self.budget.time_budget.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in self.entries.values() {
            w.write_all(&e.act_id.to_le_bytes())?;
            w.write_all(&e.numel.to_le_bytes())?;
            w.write_all(&[e.bitwidth.bits()])?;
            w.write_all(&e.size_bytes.to_le_bytes())?;
            w.write_all(&e.time_cost.to_le_bytes())?;
            w.write_all(&e.importance.to_le_bytes())?;
            w.write_all(&e.moving_average.to_le_bytes())?;
            w.write_all(&(e.page_span.len() as u32).to_le_bytes())?;
            for p in &e.page_span {
                w.write_all(&p.to_le_bytes())?;
            }
        }
        w.write_all(&self.arena.bytes)?;
        Ok(())
    }

    pub fn read_snapshot<R: Read>(mut r: R) -> Result<Self> {
        fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
            let mut b = [0u8; N];
            r.read_exact(&mut b).map_err(|_| Error::corrupt("truncated snapshot"))?;
            Ok(b)
        }
        let u64_of = |b: [u8; 8]| u64::from_le_bytes(b);
        if &take::<4, _>(&mut r)? != SNAPSHOT_MAGIC {
            return Err(Error::corrupt("bad snapshot magic"));
        }
        if take::<1, _>(&mut r)?[0] != SNAPSHOT_VERSION {
            return Err(Error::corrupt("unsupported snapshot version"));
        }
        let page_size = u64_of(take(&mut r)?);
        let step = u64_of(take(&mut r)?);
        let capacity = u64_of(take(&mut r)?);
        let mem_budget = u64_of(take(&mut r)?);
        let time_budget = f64::from_le_bytes(take(&mut r)?);
        let mut store = PageStore::new(mem_budget.max(step), page_size, step)
            .map_err(|e| Error::corrupt(e.to_string()))?
            .with_time_budget(time_budget);
        if capacity % step != 0 || capacity == 0 {
            return Err(Error::corrupt("snapshot capacity is not step aligned"));
        }
        while store.arena.capacity < capacity {
            store.arena.grow();
        }
        let n = u64_of(take(&mut r)?);
        let mut entries = Vec::new();
        for _ in 0..n {
            let act_id = u64_of(take(&mut r)?);
            let numel = u64_of(take(&mut r)?);
            let bitwidth =
                Bitwidth::new(take::<1, _>(&mut r)?[0]).map_err(|e| Error::corrupt(e.to_string()))?;
            let size_bytes = u64_of(take(&mut r)?);
            let time_cost = f64::from_le_bytes(take(&mut r)?);
            let importance = f64::from_le_bytes(take(&mut r)?);
            let moving_average = f64::from_le_bytes(take(&mut r)?);
            let pages = u32::from_le_bytes(take(&mut r)?);
            let page_span = (0..pages)
                .map(|_| Ok(u32::from_le_bytes(take(&mut r)?)))
                .collect::<Result<Vec<_>>>()?;
            entries.push(ActivationEntry {
                act_id,
                numel,
                bitwidth,
                size_bytes,
                time_cost,
                importance,
                moving_average,
                page_span,
            });
        }
        r.read_exact(&mut store.arena.bytes)
            .map_err(|_| Error::corrupt("truncated snapshot arena"))?;
        for e in entries {
            if e.page_span.iter().any(|&p| p as usize >= store.arena.pages() || !store.arena.free[p as usize]) {
                return Err(Error::corrupt("snapshot page table is inconsistent"));
            }
            store.arena.claim(&e.page_span, e.act_id);
            store.trees.insert(e.act_id, e.mem_density(), e.time_density())?;
            store.budget.mem_used += e.size_bytes;
            store.budget.time_used += e.time_cost;
            store.entries.insert(e.act_id, e);
        }
        store
            .check_invariants()
            .map_err(Error::CorruptData)?;
        Ok(store)
    }
}

const SNAPSHOT_MAGIC: &[u8; 4] = b"DAFS";
const SNAPSHOT_VERSION: u8 = 1;
