use serde::{Deserialize, Serialize};

use crate::flow::{rank_order, FlowKey, PacketRecord};

/// Ordered flow report, heaviest first.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TopReport {
    pub entries: Vec<(FlowKey, u64)>,
    /// How many entries were asked for (`ceil(k * overreport_factor)`).
    pub requested: usize,
    /// Set when the request exceeded what the structure can hold or holds.
    pub clamped: bool,
}

impl TopReport {
    /// Rank `candidates` and keep the top `requested`, limited to `limit`.
    pub(crate) fn from_candidates(
        mut candidates: Vec<(FlowKey, u64)>,
        requested: usize,
        limit: usize,
    ) -> Self {
        candidates.sort_unstable_by(rank_order);
        let take = requested.min(limit).min(candidates.len());
        candidates.truncate(take);
        TopReport {
            entries: candidates,
            requested,
            clamped: requested > limit || requested > take,
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &FlowKey> {
        self.entries.iter().map(|(k, _)| k)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Number of entries to report for `k` heavy hitters with overreporting.
pub fn report_size(k: usize, overreport_factor: f64) -> usize {
    assert!(overreport_factor >= 1.0, "overreport factor must be at least 1");
    (k as f64 * overreport_factor).ceil() as usize
}

/// Common surface of every streaming top-k structure driven by the harness.
pub trait HeavyHitterSketch: Send {
    fn insert(&mut self, record: &PacketRecord);

    fn report(&self, k: usize, overreport_factor: f64) -> TopReport;

    /// Per-flow estimates for every flow currently held.
    fn estimates(&self) -> Vec<(FlowKey, u64)>;

    /// Zero all state, as a switch does at the end of an interval.
    fn reset(&mut self);

    fn is_empty(&self) -> bool;

    /// Fraction of slots holding a duplicate key, for structures that allow them.
    fn duplicate_fraction(&self) -> Option<f64> {
        None
    }
}
