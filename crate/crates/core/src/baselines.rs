//! Comparison schemes: sample-and-hold, and a count-min sketch feeding a
//! hash-indexed heavy-flow cache.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FlowKey, Granularity, PacketRecord};
use crate::hashing::HashFamily;
use crate::metrics::slot_bytes;
use crate::sketch::{report_size, HeavyHitterSketch, TopReport};

/// Sample-and-hold flow table. Lookups may hit any entry; new flows are
/// admitted with probability `p_s` per packet until the table is full.
#[derive(Clone, Debug)]
pub struct SampleHold {
    capacity: usize,
    prob: f64,
    entries: Vec<(FlowKey, u64)>,
    index: HashMap<FlowKey, usize>,
    table_full_events: u64,
}

impl SampleHold {
    pub fn new(capacity: usize, prob: f64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("sample-and-hold needs at least one entry"));
        }
        if !(prob > 0.0 && prob <= 1.0) {
            return Err(Error::config(format!("sampling probability {prob} not in (0, 1]")));
        }
        Ok(Self {
            capacity,
            prob,
            entries: Vec::with_capacity(capacity),
            index: HashMap::with_capacity(capacity),
            table_full_events: 0,
        })
    }

    /// `p_s = capacity * oversampling / expected_packets`, capped at 1.
    pub fn sampling_probability(capacity: usize, expected_packets: u64, oversampling: f64) -> f64 {
        if expected_packets == 0 {
            return 1.0;
        }
        (capacity as f64 * oversampling / expected_packets as f64).clamp(f64::MIN_POSITIVE, 1.0)
    }

    pub fn probability(&self) -> f64 {
        self.prob
    }

    pub fn entries(&self) -> &[(FlowKey, u64)] {
        &self.entries
    }

    pub fn get(&self, key: &FlowKey) -> Option<u64> {
        self.index.get(key).map(|&i| self.entries[i].1)
    }

    /// Sampled packets that found no room.
    pub fn table_full_events(&self) -> u64 {
        self.table_full_events
    }

    pub fn insert<R: Rng + ?Sized>(&mut self, record: &PacketRecord, rng: &mut R) {
        if let Some(&i) = self.index.get(&record.key) {
            self.entries[i].1 += record.weight;
            return;
        }
        // A packet of weight w is sampled if any of its w units is.
        let p = if self.prob >= 1.0 {
            1.0
        } else {
            1.0 - (1.0 - self.prob).powf(record.weight as f64)
        };
        if !rng.random_bool(p) {
            return;
        }
        if self.entries.len() == self.capacity {
            self.table_full_events += 1;
            return;
        }
        self.index.insert(record.key, self.entries.len());
        self.entries.push((record.key, record.weight));
    }

    pub fn report(&self, k: usize) -> TopReport {
        TopReport::from_candidates(self.entries.clone(), k, self.capacity)
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.index.clear();
        self.table_full_events = 0;
    }
}

/// A cached heavy flow. Its reported size is the sketch estimate from before
/// admission plus the exact count from the admission packet onwards.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: FlowKey,
    pub prior_estimate: u64,
    pub exact: u64,
}

impl CacheEntry {
    pub fn total(&self) -> u64 {
        self.prior_estimate + self.exact
    }
}

/// Sketch and cache dimensions for a memory budget, half to each side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CmsGeometry {
    pub rows: usize,
    pub width: usize,
    pub cache_slots: usize,
}

pub const CMS_ROWS: usize = 4;
pub const CMS_COUNTER_BYTES: usize = 4;

impl CmsGeometry {
    pub fn from_budget(budget_bytes: usize, rows: usize, granularity: Granularity) -> Result<Self> {
        let half = budget_bytes / 2;
        let width = half / (rows * CMS_COUNTER_BYTES);
        let cache_slots = half / slot_bytes(granularity);
        if rows == 0 || width == 0 || cache_slots == 0 {
            return Err(Error::config(format!(
                "{budget_bytes} bytes is too small for a {rows}-row sketch plus cache"
            )));
        }
        Ok(Self {
            rows,
            width,
            cache_slots,
        })
    }
}

/// Count-min sketch whose heavy flows are promoted into a flow cache.
#[derive(Clone, Debug)]
pub struct CmsWithCache {
    geometry: CmsGeometry,
    counters: Vec<Vec<u64>>,
    row_hash: HashFamily,
    cache_hash: HashFamily,
    cache: Vec<Option<CacheEntry>>,
    threshold: u64,
    rejected_admissions: u64,
}

impl CmsWithCache {
    pub fn new(geometry: CmsGeometry, threshold: u64, seed: u64) -> Result<Self> {
        if geometry.rows == 0 || geometry.width == 0 || geometry.cache_slots == 0 {
            return Err(Error::config("count-min geometry must be non-empty"));
        }
        Ok(Self {
            geometry,
            counters: vec![vec![0; geometry.width]; geometry.rows],
            row_hash: HashFamily::new(seed, vec![geometry.width; geometry.rows]),
            cache_hash: HashFamily::new(seed ^ 0x5bd1_e995_c0ff_ee00, vec![geometry.cache_slots]),
            cache: vec![None; geometry.cache_slots],
            threshold,
            rejected_admissions: 0,
        })
    }

    pub fn geometry(&self) -> CmsGeometry {
        self.geometry
    }

    pub fn threshold(&self) -> u64 {
        self.threshold
    }

    /// Minimum over rows of the key's counters.
    pub fn sketch_estimate(&self, key: &FlowKey) -> u64 {
        (0..self.geometry.rows)
            .map(|r| self.counters[r][self.row_hash.index(r, key)])
            .min()
            .unwrap_or(0)
    }

    pub fn cached(&self, key: &FlowKey) -> Option<&CacheEntry> {
        self.cache[self.cache_hash.index(0, key)]
            .as_ref()
            .filter(|e| e.key == *key)
    }

    pub fn cache_entries(&self) -> impl Iterator<Item = &CacheEntry> {
        self.cache.iter().flatten()
    }

    /// Heavy flows turned away because their cache slot was taken.
    pub fn rejected_admissions(&self) -> u64 {
        self.rejected_admissions
    }

    pub fn insert(&mut self, record: &PacketRecord) {
        let (key, w) = (record.key, record.weight);
        let slot = self.cache_hash.index(0, &key);
        if let Some(e) = &mut self.cache[slot] {
            if e.key == key {
                e.exact += w;
                return;
            }
        }
        let mut estimate = u64::MAX;
        for r in 0..self.geometry.rows {
            let c = &mut self.counters[r][self.row_hash.index(r, &key)];
            *c += w;
            estimate = estimate.min(*c);
        }
        if estimate < self.threshold {
            return;
        }
        match &self.cache[slot] {
            None => {
                log::trace!("admitting {key} at estimate {estimate}");
                self.cache[slot] = Some(CacheEntry {
                    key,
                    prior_estimate: estimate - w,
                    exact: w,
                });
            }
            Some(_) => self.rejected_admissions += 1,
        }
    }

    pub fn report(&self, k: usize) -> TopReport {
        let candidates = self.cache_entries().map(|e| (e.key, e.total())).collect();
        TopReport::from_candidates(candidates, k, self.geometry.cache_slots)
    }

    pub fn clear(&mut self) {
        self.counters.iter_mut().for_each(|row| row.fill(0));
        self.cache.fill(None);
        self.rejected_admissions = 0;
    }
}

/// Sample-and-hold bundled with its own seeded sampling RNG.
#[derive(Clone, Debug)]
pub struct SeededSampleHold {
    table: SampleHold,
    rng: ChaCha8Rng,
    seed: u64,
}

impl SeededSampleHold {
    pub fn new(table: SampleHold, seed: u64) -> Self {
        Self {
            table,
            rng: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    pub fn table(&self) -> &SampleHold {
        &self.table
    }
}

impl HeavyHitterSketch for SeededSampleHold {
    fn insert(&mut self, record: &PacketRecord) {
        self.table.insert(record, &mut self.rng);
    }

    fn report(&self, k: usize, overreport_factor: f64) -> TopReport {
        self.table.report(report_size(k, overreport_factor))
    }

    fn estimates(&self) -> Vec<(FlowKey, u64)> {
        self.table.entries.clone()
    }

    fn reset(&mut self) {
        self.table.clear();
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
    }

    fn is_empty(&self) -> bool {
        self.table.entries.is_empty()
    }
}

impl HeavyHitterSketch for CmsWithCache {
    fn insert(&mut self, record: &PacketRecord) {
        CmsWithCache::insert(self, record)
    }

    fn report(&self, k: usize, overreport_factor: f64) -> TopReport {
        CmsWithCache::report(self, report_size(k, overreport_factor))
    }

    fn estimates(&self) -> Vec<(FlowKey, u64)> {
        self.cache_entries().map(|e| (e.key, e.total())).collect()
    }

    fn reset(&mut self) {
        self.clear()
    }

    fn is_empty(&self) -> bool {
        self.cache.iter().all(Option::is_none) && self.counters.iter().flatten().all(|&c| c == 0)
    }
}
