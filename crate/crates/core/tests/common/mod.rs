//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::cmp::Ordering;

/// Scalar packer written straight from the layout description: element `e`
/// of a tile lives in group `e / 4v`, word `4g + (e % 4)`, slot `(e % 4v) / 4`
/// counted from the most significant end.
pub fn reference_pack(q: &[u32], bits: u32, tile: usize) -> Vec<u32> {
    let per_word = (32 / bits) as usize;
    let tile_words = tile * bits as usize / 32;
    let tiles = q.len().div_ceil(tile);
    let mut words = vec![0u32; tiles * tile_words];
    for (i, &v) in q.iter().enumerate() {
        let (t, e) = (i / tile, i % tile);
        let group = e / (4 * per_word);
        let r = e % (4 * per_word);
        let word = t * tile_words + 4 * group + r % 4;
        let slot = (r / 4) as u32;
        let shift = 32 - bits * (slot + 1);
        words[word] |= v << shift;
    }
    words
}

fn density(importance: f64, cost: f64) -> f64 {
    if cost > 0.0 {
        importance / cost
    } else {
        f64::INFINITY
    }
}

fn key_cmp(a: (f64, u64), b: (f64, u64)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShadowEntry {
    pub id: u64,
    pub size: u64,
    pub time: f64,
    pub importance: f64,
    pub bits: u8,
    pub pages: Vec<u32>,
}

impl ShadowEntry {
    fn mem_key(&self) -> (f64, u64) {
        (density(self.importance, self.size as f64), self.id)
    }

    fn time_key(&self) -> (f64, u64) {
        (density(self.importance, self.time), self.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShadowKind {
    Mem,
    Time,
}

/// Flat-list model of the page store: linear scans everywhere.
#[derive(Debug, Clone)]
pub struct ShadowStore {
    pub page: u64,
    pub step: u64,
    pub capacity: u64,
    pub budget: u64,
    pub time_budget: f64,
    pub free: Vec<bool>,
    pub entries: Vec<ShadowEntry>,
    pub evicted: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShadowError {
    Duplicate,
    Rejected,
    NoSpace,
    Missing,
    MustEvict,
}

impl ShadowStore {
    pub fn new(budget: u64, page: u64, step: u64) -> Self {
        Self {
            page,
            step,
            capacity: step,
            budget,
            time_budget: f64::INFINITY,
            free: vec![true; (step / page) as usize],
            entries: Vec::new(),
            evicted: Vec::new(),
        }
    }

    pub fn mem_used(&self) -> u64 {
        self.entries.iter().map(|e| e.size).sum()
    }

    pub fn time_used(&self) -> f64 {
        self.entries.iter().map(|e| e.time).sum()
    }

    fn find(&self, n: usize) -> Option<Vec<u32>> {
        for start in 0..self.free.len() {
            if start + n <= self.free.len() && self.free[start..start + n].iter().all(|&f| f) {
                return Some((start as u32..(start + n) as u32).collect());
            }
        }
        let any: Vec<u32> = (0..self.free.len() as u32).filter(|&p| self.free[p as usize]).take(n).collect();
        (any.len() == n).then_some(any)
    }

    pub fn insert(&mut self, id: u64, size: u64, time: f64, importance: f64, bits: u8) -> Result<Vec<u32>, ShadowError> {
        if self.entries.iter().any(|e| e.id == id) {
            return Err(ShadowError::Duplicate);
        }
        if self.mem_used() + size > self.budget || self.time_used() + time > self.time_budget {
            return Err(ShadowError::Rejected);
        }
        let n = size.div_ceil(self.page) as usize;
        let pages = loop {
            if let Some(p) = self.find(n) {
                break p;
            }
            if self.capacity + self.step <= self.budget / self.step * self.step {
                self.capacity += self.step;
                self.free.resize((self.capacity / self.page) as usize, true);
            } else {
                return Err(ShadowError::NoSpace);
            }
        };
        for &p in &pages {
            self.free[p as usize] = false;
        }
        self.entries.push(ShadowEntry {
            id,
            size,
            time,
            importance,
            bits,
            pages: pages.clone(),
        });
        Ok(pages)
    }

    pub fn evict(&mut self, id: u64) -> Result<(), ShadowError> {
        let i = self.entries.iter().position(|e| e.id == id).ok_or(ShadowError::Missing)?;
        let e = self.entries.remove(i);
        for p in e.pages {
            self.free[p as usize] = true;
        }
        self.evicted.push(id);
        Ok(())
    }

    pub fn shrink(&mut self, id: u64, bits: u8, size: u64) -> Result<Vec<u32>, ShadowError> {
        let page = self.page;
        let e = self.entries.iter_mut().find(|e| e.id == id).ok_or(ShadowError::Missing)?;
        if e.bits == 2 {
            return Err(ShadowError::MustEvict);
        }
        let keep = size.div_ceil(page) as usize;
        let surplus = e.pages.split_off(keep);
        e.size = size;
        e.bits = bits;
        let pages = e.pages.clone();
        for p in surplus {
            self.free[p as usize] = true;
        }
        Ok(pages)
    }

    pub fn order(&self, kind: ShadowKind) -> Vec<u64> {
        let mut keys: Vec<(f64, u64)> = self
            .entries
            .iter()
            .map(|e| match kind {
                ShadowKind::Mem => e.mem_key(),
                ShadowKind::Time => e.time_key(),
            })
            .collect();
        keys.sort_by(|a, b| key_cmp(*a, *b));
        keys.into_iter().map(|k| k.1).collect()
    }

    pub fn victim(&self, kind: ShadowKind) -> Option<u64> {
        self.order(kind).first().copied()
    }

    pub fn pages_of(&self, id: u64) -> Option<Vec<u32>> {
        self.entries.iter().find(|e| e.id == id).map(|e| e.pages.clone())
    }

    pub fn resize(&mut self, new_budget: u64) {
        self.budget = new_budget;
        while self.mem_used() > new_budget {
            let v = self.victim(ShadowKind::Mem).unwrap();
            self.evict(v).unwrap();
        }
        let target = new_budget / self.step * self.step;
        while self.capacity > target {
            let keep = ((self.capacity - self.step) / self.page) as usize;
            while self.free.iter().filter(|&&f| !f).count() > keep {
                let v = self.victim(ShadowKind::Mem).unwrap();
                self.evict(v).unwrap();
            }
            for page in keep..self.free.len() {
                if self.free[page] {
                    continue;
                }
                let to = (0..keep).find(|&p| self.free[p]).unwrap();
                for e in &mut self.entries {
                    for p in &mut e.pages {
                        if *p as usize == page {
                            *p = to as u32;
                        }
                    }
                }
                self.free[page] = true;
                self.free[to] = false;
            }
            self.capacity -= self.step;
            self.free.truncate((self.capacity / self.page) as usize);
        }
    }
}
