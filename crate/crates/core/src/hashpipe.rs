//! HashParallel and HashPipe over `d` disjoint per-stage hash tables.
//!
//! Both variants share [`StagePipeline`]: stage `i` is an array of
//! [`TableSlot`]s indexed by hash function `h_i`. HashParallel probes one slot
//! in every stage and replaces the smallest probed counter. HashPipe always
//! installs the incoming key in the first stage and carries the displaced
//! `(key, count)` forward, keeping the larger of carried and resident at each
//! later stage; whatever is still carried after the last stage is evicted.
//!
//! Every table access made while inserting goes through the pipeline's
//! access tracker when one is enabled, so the one-read/one-write-per-stage
//! discipline can be checked from the log rather than assumed.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flow::{FlowKey, PacketRecord};
use crate::hashing::{split_slots, HashFamily};
use crate::sketch::{report_size, HeavyHitterSketch, TopReport};

/// One memory cell: `(key, count, valid)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TableSlot {
    pub key: FlowKey,
    pub val: u64,
    pub valid: bool,
}

impl TableSlot {
    pub fn occupied(key: FlowKey, val: u64) -> Self {
        Self {
            key,
            val,
            valid: true,
        }
    }

    #[inline]
    fn holds(&self, key: &FlowKey) -> bool {
        self.valid && self.key == *key
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageTable {
    slots: Vec<TableSlot>,
}

impl StageTable {
    fn new(size: usize) -> Self {
        Self {
            slots: vec![TableSlot::default(); size],
        }
    }

    pub fn slots(&self) -> &[TableSlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AccessViolation {
    RepeatedRead { packet: u64, stage: usize },
    /// A stage was read after a later stage had already been read.
    Revisit { packet: u64, stage: usize },
    WriteWithoutRead { packet: u64, stage: usize },
    RepeatedWrite { packet: u64, stage: usize },
    /// The write went to a different slot than the one read.
    IndexMismatch { packet: u64, stage: usize },
}

/// Aggregate of all per-packet stage accesses.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessSummary {
    pub packets: u64,
    pub reads_per_stage: Vec<u64>,
    pub writes_per_stage: Vec<u64>,
    /// Most reads any one packet made to any one stage.
    pub max_reads: u32,
    pub max_writes: u32,
    /// Packets that wrote to a stage behind the furthest stage they had read,
    /// i.e. that would need a second trip through a switch pipeline.
    pub second_pass_packets: u64,
    pub violations: u64,
    /// The first few violations, for diagnostics.
    pub sample_violations: Vec<AccessViolation>,
}

impl AccessSummary {
    /// True when every packet made a single forward pass with at most one
    /// read and one write per stage.
    pub fn is_feed_forward(&self) -> bool {
        self.violations == 0 && self.second_pass_packets == 0 && self.max_reads <= 1 && self.max_writes <= 1
    }
}

const KEPT_VIOLATIONS: usize = 16;

#[derive(Clone, Debug)]
struct AccessTracker {
    summary: AccessSummary,
    reads: Vec<u32>,
    writes: Vec<u32>,
    read_index: Vec<usize>,
    furthest: Option<usize>,
    second_pass: bool,
}

impl AccessTracker {
    fn new(stages: usize) -> Self {
        Self {
            summary: AccessSummary {
                reads_per_stage: vec![0; stages],
                writes_per_stage: vec![0; stages],
                ..Default::default()
            },
            reads: vec![0; stages],
            writes: vec![0; stages],
            read_index: vec![0; stages],
            furthest: None,
            second_pass: false,
        }
    }

    fn violation(&mut self, v: AccessViolation) {
        self.summary.violations += 1;
        if self.summary.sample_violations.len() < KEPT_VIOLATIONS {
            self.summary.sample_violations.push(v);
        }
    }

    fn begin(&mut self) {
        self.reads.fill(0);
        self.writes.fill(0);
        self.furthest = None;
        self.second_pass = false;
    }

    fn read(&mut self, stage: usize, idx: usize) {
        let packet = self.summary.packets;
        if self.reads[stage] > 0 {
            self.violation(AccessViolation::RepeatedRead { packet, stage });
        }
        if self.furthest.is_some_and(|f| f > stage) {
            self.violation(AccessViolation::Revisit { packet, stage });
        }
        self.reads[stage] += 1;
        self.read_index[stage] = idx;
        self.furthest = Some(self.furthest.map_or(stage, |f| f.max(stage)));
    }

    fn write(&mut self, stage: usize, idx: usize) {
        let packet = self.summary.packets;
        if self.reads[stage] == 0 {
            self.violation(AccessViolation::WriteWithoutRead { packet, stage });
        } else if self.read_index[stage] != idx {
            self.violation(AccessViolation::IndexMismatch { packet, stage });
        }
        if self.writes[stage] > 0 {
            self.violation(AccessViolation::RepeatedWrite { packet, stage });
        }
        if self.furthest.is_some_and(|f| f > stage) {
            self.second_pass = true;
        }
        self.writes[stage] += 1;
    }

    fn finish(&mut self) {
        let s = &mut self.summary;
        for (i, (&r, &w)) in self.reads.iter().zip(&self.writes).enumerate() {
            s.reads_per_stage[i] += u64::from(r);
            s.writes_per_stage[i] += u64::from(w);
            s.max_reads = s.max_reads.max(r);
            s.max_writes = s.max_writes.max(w);
        }
        s.second_pass_packets += u64::from(self.second_pass);
        s.packets += 1;
    }
}

/// `d` disjoint stage tables plus the hash family that indexes them.
#[derive(Clone, Debug)]
pub struct StagePipeline {
    stages: Vec<StageTable>,
    family: HashFamily,
    seed: u64,
    inserted: u64,
    evicted_mass: u64,
    evictions: u64,
    tracker: Option<AccessTracker>,
}

/// Run metadata recorded with every report.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineMeta {
    pub seed: u64,
    pub stage_sizes: Vec<usize>,
    pub access_log: bool,
}

impl StagePipeline {
    /// Split `slots` over `stages` tables (earlier stages take the remainder)
    /// and draw the hash family from `seed`.
    pub fn new(slots: usize, stages: usize, seed: u64) -> Result<Self> {
        let sizes = split_slots(slots, stages)?;
        Ok(Self::with_family(HashFamily::new(seed, sizes), seed))
    }

    pub fn with_family(family: HashFamily, seed: u64) -> Self {
        Self {
            stages: family.stage_sizes().iter().map(|&s| StageTable::new(s)).collect(),
            family,
            seed,
            inserted: 0,
            evicted_mass: 0,
            evictions: 0,
            tracker: None,
        }
    }

    pub fn with_access_log(mut self) -> Self {
        self.tracker = Some(AccessTracker::new(self.stages.len()));
        self
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn total_slots(&self) -> usize {
        self.stages.iter().map(StageTable::len).sum()
    }

    pub fn stage_sizes(&self) -> &[usize] {
        self.family.stage_sizes()
    }

    pub fn stages(&self) -> &[StageTable] {
        &self.stages
    }

    pub fn family(&self) -> &HashFamily {
        &self.family
    }

    pub fn meta(&self) -> PipelineMeta {
        PipelineMeta {
            seed: self.seed,
            stage_sizes: self.stage_sizes().to_vec(),
            access_log: self.tracker.is_some(),
        }
    }

    pub fn access_summary(&self) -> Option<&AccessSummary> {
        self.tracker.as_ref().map(|t| &t.summary)
    }

    /// Total weight offered to the pipeline.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Total count carried out of the last stage by evictions.
    pub fn evicted_mass(&self) -> u64 {
        self.evicted_mass
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    /// Sum of all valid counters.
    pub fn table_mass(&self) -> u64 {
        self.occupied().map(|s| s.val).sum()
    }

    pub fn occupied(&self) -> impl Iterator<Item = &TableSlot> {
        self.stages.iter().flat_map(|t| t.slots.iter()).filter(|s| s.valid)
    }

    pub fn is_empty(&self) -> bool {
        self.inserted == 0 && self.occupied().next().is_none()
    }

    pub fn clear(&mut self) {
        for t in &mut self.stages {
            t.slots.fill(TableSlot::default());
        }
        self.inserted = 0;
        self.evicted_mass = 0;
        self.evictions = 0;
        if let Some(t) = &mut self.tracker {
            *t = AccessTracker::new(self.stages.len());
        }
    }

    /// Uninstrumented lookup of the slot `key` hashes to in `stage`.
    pub fn peek(&self, stage: usize, key: &FlowKey) -> &TableSlot {
        &self.stages[stage].slots[self.family.index(stage, key)]
    }

    /// Sum of every counter, across stages, whose slot for `key` holds `key`.
    pub fn estimate(&self, key: &FlowKey) -> u64 {
        (0..self.stages.len())
            .map(|i| self.peek(i, key))
            .filter(|s| s.holds(key))
            .map(|s| s.val)
            .sum()
    }

    /// Smallest counter among the slots `key` hashes to (empty counts as 0).
    pub fn probed_min(&self, key: &FlowKey) -> u64 {
        (0..self.stages.len())
            .map(|i| {
                let s = self.peek(i, key);
                if s.valid {
                    s.val
                } else {
                    0
                }
            })
            .min()
            .unwrap_or(0)
    }

    /// Valid entries with duplicate keys merged by summation.
    pub fn merged_counts(&self) -> Vec<(FlowKey, u64)> {
        let mut merged: HashMap<FlowKey, u64> = HashMap::new();
        for s in self.occupied() {
            *merged.entry(s.key).or_default() += s.val;
        }
        merged.into_iter().collect()
    }

    /// Top `ceil(k * overreport_factor)` flows after merging duplicates.
    pub fn report(&self, k: usize, overreport_factor: f64) -> TopReport {
        let merged = self.merged_counts();
        let limit = merged.len();
        TopReport::from_candidates(merged, report_size(k, overreport_factor), limit)
    }

    /// Slots holding a key already present in another slot, over total slots.
    /// A key in three stages contributes two duplicate slots.
    pub fn duplicate_fraction(&self) -> f64 {
        let mut seen: HashMap<FlowKey, usize> = HashMap::new();
        for s in self.occupied() {
            *seen.entry(s.key).or_default() += 1;
        }
        let dups: usize = seen.values().map(|n| n - 1).sum();
        dups as f64 / self.total_slots() as f64
    }

    #[inline]
    fn begin_packet(&mut self, weight: u64) {
        self.inserted += weight;
        if let Some(t) = &mut self.tracker {
            t.begin();
        }
    }

    #[inline]
    fn end_packet(&mut self) {
        if let Some(t) = &mut self.tracker {
            t.finish();
        }
    }

    #[inline]
    fn read(&mut self, stage: usize, idx: usize) -> TableSlot {
        if let Some(t) = &mut self.tracker {
            t.read(stage, idx);
        }
        self.stages[stage].slots[idx]
    }

    #[inline]
    fn write(&mut self, stage: usize, idx: usize, key: FlowKey, val: u64) {
        if let Some(t) = &mut self.tracker {
            t.write(stage, idx);
        }
        self.stages[stage].slots[idx] = TableSlot::occupied(key, val);
    }

    /// Put `(key, val)` straight into `key`'s slot of `stage`, bypassing the
    /// algorithms. Used to set up table states in tests.
    #[doc(hidden)]
    pub fn place(&mut self, stage: usize, key: FlowKey, val: u64) {
        let idx = self.family.index(stage, &key);
        self.stages[stage].slots[idx] = TableSlot::occupied(key, val);
    }

    /// HashParallel insertion: probe one slot per stage; on a hit increment,
    /// otherwise fill the first empty probed slot, otherwise replace the
    /// smallest probed counter (lowest stage on ties) with `min + weight`.
    pub fn parallel_insert(&mut self, record: &PacketRecord) -> ParallelOutcome {
        let (key, w) = (record.key, record.weight);
        self.begin_packet(w);
        let d = self.stages.len();
        let mut hit = None;
        let mut empty = None;
        let mut min: Option<(usize, usize, TableSlot)> = None;
        for i in 0..d {
            let idx = self.family.index(i, &key);
            let s = self.read(i, idx);
            if s.holds(&key) {
                hit.get_or_insert((i, idx, s));
            } else if !s.valid {
                empty.get_or_insert((i, idx));
            } else if min.is_none_or(|(_, _, m)| s.val < m.val) {
                min = Some((i, idx, s));
            }
        }
        let outcome = if let Some((i, idx, s)) = hit {
            self.write(i, idx, key, s.val + w);
            ParallelOutcome::Hit { stage: i }
        } else if let Some((i, idx)) = empty {
            self.write(i, idx, key, w);
            ParallelOutcome::Inserted { stage: i }
        } else {
            let (i, idx, s) = min.expect("every probed slot is occupied");
            let installed = s.val + w;
            self.write(i, idx, key, installed);
            ParallelOutcome::Replaced {
                stage: i,
                displaced: (s.key, s.val),
                probed_min: s.val,
                installed,
            }
        };
        self.end_packet();
        outcome
    }

    /// HashPipe insertion.
    pub fn pipe_insert(&mut self, record: &PacketRecord) -> EvictionOutcome {
        let (key, w) = (record.key, record.weight);
        self.begin_packet(w);
        let outcome = self.pipe_insert_inner(key, w);
        self.end_packet();
        outcome
    }

    #[inline]
    fn pipe_insert_inner(&mut self, key: FlowKey, w: u64) -> EvictionOutcome {
        let idx = self.family.index(0, &key);
        let first = self.read(0, idx);
        if first.holds(&key) {
            self.write(0, idx, key, first.val + w);
            return EvictionOutcome::None;
        }
        self.write(0, idx, key, w);
        if !first.valid {
            return EvictionOutcome::None;
        }
        let (mut c_key, mut c_val) = (first.key, first.val);
        for i in 1..self.stages.len() {
            let idx = self.family.index(i, &c_key);
            let s = self.read(i, idx);
            if s.holds(&c_key) {
                self.write(i, idx, c_key, s.val + c_val);
                return EvictionOutcome::MergedAt(i);
            }
            if !s.valid {
                self.write(i, idx, c_key, c_val);
                return EvictionOutcome::None;
            }
            if s.val < c_val {
                self.write(i, idx, c_key, c_val);
                (c_key, c_val) = (s.key, s.val);
            }
        }
        self.evicted_mass += c_val;
        self.evictions += 1;
        EvictionOutcome::Evicted(c_key, c_val)
    }
}

/// Result of one HashParallel insertion. Stage indices are 0-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParallelOutcome {
    Hit { stage: usize },
    Inserted { stage: usize },
    Replaced {
        stage: usize,
        displaced: (FlowKey, u64),
        probed_min: u64,
        installed: u64,
    },
}

/// Result of one HashPipe insertion. Stage indices are 0-based.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvictionOutcome {
    /// Counted in place or installed in an empty slot.
    None,
    /// The carried key met its own duplicate at this stage and was merged.
    MergedAt(usize),
    /// This pair left the last stage and is gone from the tables.
    Evicted(FlowKey, u64),
}

/// HashParallel: sample one slot per stage, replace the sampled minimum.
#[derive(Clone, Debug)]
pub struct HashParallel {
    pipeline: StagePipeline,
}

impl HashParallel {
    pub fn new(slots: usize, stages: usize, seed: u64) -> Result<Self> {
        Ok(Self::from_pipeline(StagePipeline::new(slots, stages, seed)?))
    }

    pub fn from_pipeline(pipeline: StagePipeline) -> Self {
        Self { pipeline }
    }

    pub fn insert(&mut self, record: &PacketRecord) -> ParallelOutcome {
        self.pipeline.parallel_insert(record)
    }

    pub fn pipeline(&self) -> &StagePipeline {
        &self.pipeline
    }

    pub fn pipeline_mut(&mut self) -> &mut StagePipeline {
        &mut self.pipeline
    }
}

/// HashPipe: always insert in stage one, carry a rolling minimum forward.
#[derive(Clone, Debug)]
pub struct HashPipe {
    pipeline: StagePipeline,
}

impl HashPipe {
    pub fn new(slots: usize, stages: usize, seed: u64) -> Result<Self> {
        Ok(Self::from_pipeline(StagePipeline::new(slots, stages, seed)?))
    }

    pub fn from_pipeline(pipeline: StagePipeline) -> Self {
        Self { pipeline }
    }

    pub fn insert(&mut self, record: &PacketRecord) -> EvictionOutcome {
        self.pipeline.pipe_insert(record)
    }

    pub fn estimate(&self, key: &FlowKey) -> u64 {
        self.pipeline.estimate(key)
    }

    pub fn pipeline(&self) -> &StagePipeline {
        &self.pipeline
    }

    pub fn pipeline_mut(&mut self) -> &mut StagePipeline {
        &mut self.pipeline
    }
}

macro_rules! impl_sketch {
    ($ty:ty, $dups:expr) => {
        impl HeavyHitterSketch for $ty {
            fn insert(&mut self, record: &PacketRecord) {
                <$ty>::insert(self, record);
            }

            fn report(&self, k: usize, overreport_factor: f64) -> TopReport {
                self.pipeline.report(k, overreport_factor)
            }

            fn estimates(&self) -> Vec<(FlowKey, u64)> {
                self.pipeline.merged_counts()
            }

            fn reset(&mut self) {
                self.pipeline.clear()
            }

            fn is_empty(&self) -> bool {
                self.pipeline.is_empty()
            }

            fn duplicate_fraction(&self) -> Option<f64> {
                $dups.then(|| self.pipeline.duplicate_fraction())
            }
        }
    };
}

impl_sketch!(HashParallel, false);
impl_sketch!(HashPipe, true);

/// Collects the counts of fully evicted pairs at every `every`-th packet.
#[derive(Clone, Debug)]
pub struct EvictionSampler {
    every: u64,
    samples: Vec<u64>,
}

impl EvictionSampler {
    pub fn new(every: u64) -> Self {
        assert!(every >= 1, "sampling period must be at least 1");
        Self {
            every,
            samples: Vec::new(),
        }
    }

    pub fn observe(&mut self, seq: u64, outcome: &EvictionOutcome) {
        if seq.is_multiple_of(self.every) {
            if let EvictionOutcome::Evicted(_, count) = outcome {
                self.samples.push(*count);
            }
        }
    }

    pub fn samples(&self) -> &[u64] {
        &self.samples
    }

    /// Empirical `(value, P[X >= value])`; empty (with a warning) when
    /// nothing was sampled.
    pub fn ccdf(&self) -> Vec<(u64, f64)> {
        if self.samples.is_empty() {
            log::warn!("no evictions were sampled; eviction CCDF is empty");
        }
        crate::metrics::ccdf(&self.samples)
    }
}
