//! Space saving over a full table of `m` slots.
//!
//! The table minimum is tracked with an ordered set of `(value, slot)` pairs,
//! so ties on the minimum go to the lowest slot index.

use std::collections::{BTreeSet, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::flow::{ExactCounts, FlowKey, PacketRecord};
use crate::sketch::{report_size, HeavyHitterSketch, TopReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsEntry {
    pub key: FlowKey,
    pub val: u64,
}

#[derive(Clone, Debug)]
pub struct SpaceSaving {
    capacity: usize,
    // Occupied slots are always a prefix, so the lowest empty slot is `slots.len()`.
    slots: Vec<SsEntry>,
    index: HashMap<FlowKey, usize>,
    by_value: BTreeSet<(u64, usize)>,
    total: u64,
    contributors: Option<Vec<HashSet<FlowKey>>>,
}

/// Distinct-contributor counts per occupied slot, split by final label.
#[derive(Clone, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct KeysPerCounter {
    pub true_positive: Vec<usize>,
    pub false_positive: Vec<usize>,
    pub other: Vec<usize>,
}

impl KeysPerCounter {
    pub fn extend(&mut self, other: KeysPerCounter) {
        self.true_positive.extend(other.true_positive);
        self.false_positive.extend(other.false_positive);
        self.other.extend(other.other);
    }
}

impl SpaceSaving {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("space saving needs at least one slot"));
        }
        Ok(Self {
            capacity,
            slots: Vec::with_capacity(capacity),
            index: HashMap::with_capacity(capacity),
            by_value: BTreeSet::new(),
            total: 0,
            contributors: None,
        })
    }

    /// Track which distinct keys contributed to each counter.
    pub fn with_contributor_tracking(mut self) -> Self {
        self.contributors = Some(vec![HashSet::new(); self.capacity]);
        self
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total weight inserted so far (`C`).
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn entries(&self) -> &[SsEntry] {
        &self.slots
    }

    pub fn get(&self, key: &FlowKey) -> Option<u64> {
        self.index.get(key).map(|&j| self.slots[j].val)
    }

    /// Smallest counter among occupied slots.
    pub fn min_value(&self) -> Option<u64> {
        self.by_value.first().map(|&(v, _)| v)
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() == self.capacity
    }

    pub fn insert(&mut self, record: &PacketRecord) {
        let w = record.weight;
        self.total += w;
        if let Some(&j) = self.index.get(&record.key) {
            let e = &mut self.slots[j];
            self.by_value.remove(&(e.val, j));
            e.val += w;
            self.by_value.insert((e.val, j));
            return;
        }
        let j = if self.slots.len() < self.capacity {
            self.slots.push(SsEntry {
                key: record.key,
                val: w,
            });
            self.slots.len() - 1
        } else {
            let (min, r) = self.by_value.pop_first().expect("full table has a minimum");
            let e = &mut self.slots[r];
            self.index.remove(&e.key);
            *e = SsEntry {
                key: record.key,
                val: min + w,
            };
            r
        };
        self.index.insert(record.key, j);
        self.by_value.insert((self.slots[j].val, j));
        if let Some(c) = &mut self.contributors {
            c[j].insert(record.key);
        }
    }

    /// Top `ceil(k * overreport_factor)` entries, clamped to the table size.
    pub fn report(&self, k: usize, overreport_factor: f64) -> TopReport {
        let candidates = self.slots.iter().map(|e| (e.key, e.val)).collect();
        TopReport::from_candidates(candidates, report_size(k, overreport_factor), self.capacity)
    }

    /// Distinct contributors per occupied slot, labelled against the oracle's
    /// top `k`: reported and truly heavy, reported but not heavy, or unreported.
    pub fn keys_per_counter(&self, k: usize, oracle: &ExactCounts) -> Result<KeysPerCounter> {
        let contributors = self
            .contributors
            .as_ref()
            .ok_or(Error::Unavailable("contributor tracking was not enabled"))?;
        let heavy: HashSet<FlowKey> = oracle.top_k(k).iter().map(|e| e.0).collect();
        let reported: HashSet<FlowKey> = self.report(k, 1.0).keys().copied().collect();
        let mut out = KeysPerCounter::default();
        for (j, e) in self.slots.iter().enumerate() {
            let n = contributors[j].len();
            match (reported.contains(&e.key), heavy.contains(&e.key)) {
                (true, true) => out.true_positive.push(n),
                (true, false) => out.false_positive.push(n),
                (false, _) => out.other.push(n),
            }
        }
        Ok(out)
    }

    pub fn clear(&mut self) {
        self.slots.clear();
        self.index.clear();
        self.by_value.clear();
        self.total = 0;
        if let Some(c) = &mut self.contributors {
            c.iter_mut().for_each(HashSet::clear);
        }
    }
}

impl HeavyHitterSketch for SpaceSaving {
    fn insert(&mut self, record: &PacketRecord) {
        SpaceSaving::insert(self, record)
    }

    fn report(&self, k: usize, overreport_factor: f64) -> TopReport {
        SpaceSaving::report(self, k, overreport_factor)
    }

    fn estimates(&self) -> Vec<(FlowKey, u64)> {
        self.slots.iter().map(|e| (e.key, e.val)).collect()
    }

    fn reset(&mut self) {
        self.clear()
    }

    fn is_empty(&self) -> bool {
        self.slots.is_empty() && self.total == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::tests::{key, records};
    use proptest::prelude::*;

    fn run(m: usize, keys: &[FlowKey]) -> SpaceSaving {
        let mut ss = SpaceSaving::new(m).unwrap().with_contributor_tracking();
        for r in records(keys) {
            ss.insert(&r);
        }
        ss
    }

    #[test]
    fn single_slot_absorbs_everything() {
        let ss = run(1, &[key(1), key(2), key(3)]);
        assert_eq!(ss.entries(), &[SsEntry { key: key(3), val: 3 }]);
    }

    #[test]
    fn repeated_key_hits() {
        let a = key(1);
        let ss = run(2, &[a, a, a]);
        assert_eq!(ss.entries(), &[SsEntry { key: a, val: 3 }]);
    }

    #[test]
    fn min_tie_goes_to_lowest_slot() {
        let ss = run(2, &[key(1), key(2), key(3)]);
        assert_eq!(ss.entries()[0], SsEntry { key: key(3), val: 2 });
        assert_eq!(ss.entries()[1], SsEntry { key: key(2), val: 1 });
    }

    #[test]
    fn weighted_replacement_adds_weight_to_min() {
        let mut ss = SpaceSaving::new(1).unwrap();
        ss.insert(&PacketRecord::new(key(1), 4, 0));
        ss.insert(&PacketRecord::new(key(2), 10, 1));
        assert_eq!(ss.get(&key(2)), Some(14));
    }

    fn table_abc() -> SpaceSaving {
        let (a, b, c) = (key(1), key(2), key(3));
        run(3, &[a, a, a, a, a, b, b, b, c])
    }

    #[test]
    fn report_top_k() {
        let ss = table_abc();
        assert_eq!(ss.report(2, 1.0).entries, vec![(key(1), 5), (key(2), 3)]);
        assert_eq!(ss.report(1, 2.0).entries, vec![(key(1), 5), (key(2), 3)]);
        assert!(!ss.report(2, 1.0).clamped);
    }

    #[test]
    fn report_clamps_to_capacity() {
        let r = table_abc().report(2, 4.0);
        assert_eq!(r.requested, 8);
        assert!(r.clamped);
        assert_eq!(r.len(), 3);
    }

    #[test]
    fn keys_per_counter_single_flow() {
        let a = key(1);
        let ss = run(4, &[a; 10]);
        let oracle = ExactCounts::from_records(&records(&[a; 10]));
        let kpc = ss.keys_per_counter(1, &oracle).unwrap();
        assert_eq!(kpc.true_positive, vec![1]);
        assert!(kpc.false_positive.is_empty() && kpc.other.is_empty());
    }

    #[test]
    fn keys_per_counter_counts_replaced_contributors() {
        let keys = [key(1), key(2), key(3)];
        let ss = run(2, &keys);
        let oracle = ExactCounts::from_records(&records(&keys));
        let kpc = ss.keys_per_counter(2, &oracle).unwrap();
        // C replaced A in slot 0; B is alone in slot 1.
        let mut all: Vec<_> = [kpc.true_positive, kpc.false_positive, kpc.other].concat();
        all.sort();
        assert_eq!(all, vec![1, 2]);
    }

    #[test]
    fn keys_per_counter_requires_instrumentation() {
        let ss = SpaceSaving::new(2).unwrap();
        let err = ss.keys_per_counter(1, &ExactCounts::default()).unwrap_err();
        assert!(matches!(err, Error::Unavailable(_)));
    }

    #[test]
    fn clear_resets() {
        let mut ss = table_abc();
        assert!(!HeavyHitterSketch::is_empty(&ss));
        ss.clear();
        assert!(HeavyHitterSketch::is_empty(&ss));
        assert_eq!(ss.min_value(), None);
    }

    proptest! {
        #[test]
        fn guarantees_hold(stream in prop::collection::vec(0u32..60, 1..400),
                           weights in prop::collection::vec(1u64..4, 400),
                           m in 1usize..24) {
            let mut ss = SpaceSaving::new(m).unwrap();
            let mut oracle = ExactCounts::default();
            for (i, (s, w)) in stream.iter().zip(&weights).enumerate() {
                let r = PacketRecord::new(key(*s), *w, i as u64);
                ss.insert(&r);
                oracle.add(r.key, r.weight);
                let min = if ss.is_full() { ss.min_value().unwrap() } else { 0 };
                for e in ss.entries() {
                    let c = oracle.count(&e.key);
                    prop_assert!(e.val >= c);
                    prop_assert!(e.val <= c + min);
                }
                prop_assert_eq!(ss.entries().iter().map(|e| e.val).sum::<u64>(), ss.total());
                let distinct: HashSet<_> = ss.entries().iter().map(|e| e.key).collect();
                prop_assert_eq!(distinct.len(), ss.entries().len());
            }
            let c = oracle.total();
            for (k, cnt) in oracle.iter() {
                if *cnt * m as u64 > c {
                    prop_assert!(ss.get(k).is_some());
                }
            }
        }
    }
}
