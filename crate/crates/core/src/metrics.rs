//! Accuracy metrics against the exact-count oracle, plus memory accounting.
//!
//! Slot counts are the canonical memory unit; bytes are derived with
//! [`slot_bytes`] (key + 4-byte counter + 1 validity byte).

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{ExactCounts, FlowKey, Granularity};

pub const COUNTER_BYTES: usize = 4;
pub const VALID_BYTES: usize = 1;

pub const fn slot_bytes(granularity: Granularity) -> usize {
    granularity.key_len() + COUNTER_BYTES + VALID_BYTES
}

/// Whole slots that fit in `budget_bytes`.
pub fn memory_to_slots(budget_bytes: usize, granularity: Granularity) -> Result<usize> {
    let per = slot_bytes(granularity);
    if budget_bytes < per {
        return Err(Error::config(format!(
            "{budget_bytes} bytes holds no {per}-byte {granularity} slot"
        )));
    }
    Ok(budget_bytes / per)
}

pub const fn slots_to_bytes(slots: usize, granularity: Granularity) -> usize {
    slots * slot_bytes(granularity)
}

/// Memory shape of a table-based sketch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SketchConfig {
    pub slots: usize,
    pub stages: usize,
    pub seed: u64,
    pub granularity: Granularity,
}

impl SketchConfig {
    pub fn from_budget(budget_bytes: usize, stages: usize, seed: u64, granularity: Granularity) -> Result<Self> {
        Ok(Self {
            slots: memory_to_slots(budget_bytes, granularity)?,
            stages,
            seed,
            granularity,
        })
    }

    pub fn slot_bytes(&self) -> usize {
        slot_bytes(self.granularity)
    }

    pub fn bytes(&self) -> usize {
        slots_to_bytes(self.slots, self.granularity)
    }
}

/// Slots space saving needs before the k-th heaviest flow is guaranteed a
/// place: `ceil(C / c_k)`.
pub fn guarantee_slots(total: u64, kth_count: u64) -> Option<u64> {
    (kth_count > 0).then(|| total.div_ceil(kth_count))
}

fn heavy_set(oracle: &ExactCounts, k: usize) -> HashSet<FlowKey> {
    oracle.top_k(k).iter().map(|e| e.0).collect()
}

fn reported_set<'a>(reported: impl IntoIterator<Item = &'a FlowKey>) -> HashSet<FlowKey> {
    reported.into_iter().copied().collect()
}

/// Fraction of the true top-k missing from `reported`. When the interval has
/// fewer than `k` flows the denominator is the number of flows.
pub fn false_negative_rate<'a>(
    reported: impl IntoIterator<Item = &'a FlowKey>,
    oracle: &ExactCounts,
    k: usize,
) -> f64 {
    let heavy = heavy_set(oracle, k);
    if heavy.is_empty() {
        return 0.0;
    }
    let reported = reported_set(reported);
    let missed = heavy.iter().filter(|h| !reported.contains(h)).count();
    missed as f64 / heavy.len() as f64
}

/// Reported flows outside the true top-k, over all flows outside it.
pub fn false_positive_rate<'a>(
    reported: impl IntoIterator<Item = &'a FlowKey>,
    oracle: &ExactCounts,
    k: usize,
) -> f64 {
    let heavy = heavy_set(oracle, k);
    let light = oracle.num_flows() - heavy.len();
    if light == 0 {
        return 0.0;
    }
    let wrong = reported_set(reported)
        .iter()
        .filter(|r| !heavy.contains(r))
        .count();
    wrong as f64 / light as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorPoint {
    pub threshold: u64,
    /// Mean of `|est - true| / true * 100`.
    pub mean_abs_pct: f64,
    /// Mean of `(est - true) / true * 100`.
    pub mean_signed_pct: f64,
    pub flows: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub points: Vec<ErrorPoint>,
    /// Thresholds with no qualifying flow.
    pub omitted: Vec<u64>,
}

/// Mean percentage estimation error over flows whose true count exceeds each
/// threshold. By default only flows held by the sketch are averaged; with
/// `include_missing`, heavier flows the sketch lacks count as 100% error.
pub fn estimation_error_curve(
    estimates: &[(FlowKey, u64)],
    oracle: &ExactCounts,
    thresholds: &[u64],
    include_missing: bool,
) -> ErrorCurve {
    let mut pairs: Vec<(u64, u64)> = estimates
        .iter()
        .map(|(k, e)| (oracle.count(k), *e))
        .filter(|(t, _)| *t > 0)
        .collect();
    if include_missing {
        let held: HashSet<&FlowKey> = estimates.iter().map(|(k, _)| k).collect();
        pairs.extend(
            oracle
                .iter()
                .filter(|(k, _)| !held.contains(k))
                .map(|(_, c)| (*c, 0)),
        );
    }
    // Fixed summation order keeps the floating-point result reproducible.
    pairs.sort_unstable();
    let mut thresholds = thresholds.to_vec();
    thresholds.sort_unstable();
    thresholds.dedup();
    let mut curve = ErrorCurve::default();
    for x in thresholds {
        let (mut abs, mut signed, mut n) = (0.0, 0.0, 0usize);
        for &(t, e) in pairs.iter().filter(|(t, _)| *t > x) {
            let diff = e as f64 - t as f64;
            abs += diff.abs() / t as f64 * 100.0;
            signed += diff / t as f64 * 100.0;
            n += 1;
        }
        if n == 0 {
            curve.omitted.push(x);
        } else {
            curve.points.push(ErrorPoint {
                threshold: x,
                mean_abs_pct: abs / n as f64,
                mean_signed_pct: signed / n as f64,
                flows: n,
            });
        }
    }
    curve
}

/// Empirical `(value, P[X >= value])` over the distinct sample values.
pub fn ccdf(samples: &[u64]) -> Vec<(u64, f64)> {
    let mut hist: BTreeMap<u64, usize> = BTreeMap::new();
    for &s in samples {
        *hist.entry(s).or_default() += 1;
    }
    let n = samples.len() as f64;
    let mut remaining = samples.len();
    hist.into_iter()
        .map(|(v, c)| {
            let p = remaining as f64 / n;
            remaining -= c;
            (v, p)
        })
        .collect()
}

/// `P[X > value]` read off a CCDF produced by [`ccdf`].
pub fn tail_probability(ccdf: &[(u64, f64)], value: u64) -> f64 {
    ccdf.iter().find(|(v, _)| *v > value).map_or(0.0, |(_, p)| *p)
}

/// Empirical `(value, P[X <= value])`.
pub fn ecdf(samples: &[usize]) -> Vec<(usize, f64)> {
    let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
    for &s in samples {
        *hist.entry(s).or_default() += 1;
    }
    let n = samples.len() as f64;
    let mut seen = 0;
    hist.into_iter()
        .map(|(v, c)| {
            seen += c;
            (v, seen as f64 / n)
        })
        .collect()
}

/// All metrics for one sketch run on one interval.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyResult {
    pub false_negative_rate: f64,
    pub false_positive_rate: f64,
    /// False negatives among the heaviest quarter of the top-k only.
    pub top_quarter_fn_rate: f64,
    pub est_error_curve: ErrorCurve,
    pub duplicate_fraction: Option<f64>,
}

impl AccuracyResult {
    pub fn evaluate(
        reported: &[(FlowKey, u64)],
        estimates: &[(FlowKey, u64)],
        oracle: &ExactCounts,
        k: usize,
        thresholds: &[u64],
        include_missing: bool,
    ) -> Self {
        let keys = || reported.iter().map(|(key, _)| key);
        AccuracyResult {
            false_negative_rate: false_negative_rate(keys(), oracle, k),
            false_positive_rate: false_positive_rate(keys(), oracle, k),
            top_quarter_fn_rate: false_negative_rate(keys(), oracle, (k / 4).max(1)),
            est_error_curve: estimation_error_curve(estimates, oracle, thresholds, include_missing),
            duplicate_fraction: None,
        }
    }
}

/// Count how many flows of the top-k fall in each of `buckets` equal rank
/// bands and are missed; handy for heaviness-bias plots.
pub fn missed_by_rank_band(reported: &[(FlowKey, u64)], oracle: &ExactCounts, k: usize, buckets: usize) -> Vec<usize> {
    let held: HashMap<&FlowKey, ()> = reported.iter().map(|(key, _)| (key, ())).collect();
    let top = oracle.top_k(k);
    let buckets = buckets.max(1);
    let mut out = vec![0; buckets];
    for (rank, (key, _)) in top.iter().enumerate() {
        if !held.contains_key(key) {
            out[rank * buckets / top.len().max(1)] += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::tests::{key, records};
    use proptest::prelude::*;

    fn oracle_abcd() -> ExactCounts {
        // A:4 B:3 C:2 D:1
        let (a, b, c, d) = (key(1), key(2), key(3), key(4));
        ExactCounts::from_records(&records(&[a, a, a, a, b, b, b, c, c, d]))
    }

    #[test]
    fn fn_one_missing() {
        let o = oracle_abcd();
        let rep = [key(1), key(2), key(4)];
        assert!((false_negative_rate(&rep, &o, 3) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(false_negative_rate(&[key(1), key(2), key(3), key(4)], &o, 3), 0.0);
    }

    #[test]
    fn fn_k_beyond_flows() {
        let o = oracle_abcd();
        assert_eq!(false_negative_rate(&[key(1), key(2)], &o, 10), 0.5);
    }

    #[test]
    fn fp_definition() {
        let o = oracle_abcd();
        // One wrong report out of one non-heavy flow.
        assert_eq!(false_positive_rate(&[key(1), key(2), key(4)], &o, 3), 1.0);
        assert_eq!(false_positive_rate(&[key(1), key(2), key(3)], &o, 3), 0.0);
        let single = ExactCounts::from_records(&records(&[key(9)]));
        assert_eq!(false_positive_rate(&[key(9)], &single, 1), 0.0);
    }

    #[test]
    fn fp_arithmetic_at_scale() {
        let rate: f64 = 15.0 / 399_700.0;
        assert!((rate * 100.0 - 0.0038).abs() < 1e-4);
    }

    #[test]
    fn error_curve_basics() {
        let o = ExactCounts::from_records(&records(&[key(1); 100]));
        let c = estimation_error_curve(&[(key(1), 90)], &o, &[50], false);
        assert_eq!(c.points.len(), 1);
        assert!((c.points[0].mean_abs_pct - 10.0).abs() < 1e-9);
        assert!((c.points[0].mean_signed_pct + 10.0).abs() < 1e-9);

        let c = estimation_error_curve(&[(key(1), 100)], &o, &[0, 10, 99, 100], false);
        assert!(c.points.iter().all(|p| p.mean_abs_pct == 0.0));
        assert_eq!(c.omitted, vec![100]);
    }

    #[test]
    fn error_curve_include_missing() {
        let o = oracle_abcd();
        let c = estimation_error_curve(&[(key(1), 4)], &o, &[0], true);
        assert_eq!(c.points[0].flows, 4);
        assert!((c.points[0].mean_abs_pct - 75.0).abs() < 1e-9);
    }

    #[test]
    fn memory_conversion() {
        assert_eq!(slot_bytes(Granularity::FiveTuple), 18);
        assert_eq!(memory_to_slots(81_000, Granularity::FiveTuple).unwrap(), 4500);
        assert_eq!(memory_to_slots(18, Granularity::FiveTuple).unwrap(), 1);
        assert_eq!(memory_to_slots(11_200, Granularity::FiveTuple).unwrap(), 622);
        assert!(memory_to_slots(17, Granularity::FiveTuple).is_err());
        let cfg = SketchConfig::from_budget(81_000, 6, 0, Granularity::FiveTuple).unwrap();
        assert_eq!((cfg.slots, cfg.bytes()), (4500, 81_000));
    }

    #[test]
    fn guarantee_arithmetic() {
        assert_eq!(guarantee_slots(10_000_000, 4000), Some(2500));
        assert_eq!(guarantee_slots(10_000_000, 6000), Some(1667));
        assert_eq!(guarantee_slots(10, 0), None);
    }

    #[test]
    fn ccdf_shape() {
        let c = ccdf(&[1, 1, 2, 5, 5, 5, 9]);
        assert_eq!(c[0], (1, 1.0));
        assert!(c.windows(2).all(|w| w[1].1 <= w[0].1));
        assert!((tail_probability(&c, 5) - 1.0 / 7.0).abs() < 1e-12);
        assert_eq!(tail_probability(&c, 9), 0.0);
        assert!(ccdf(&[]).is_empty());
    }

    #[test]
    fn ecdf_ends_at_one() {
        let c = ecdf(&[3, 1, 2, 2]);
        assert_eq!(c, vec![(1, 0.25), (2, 0.75), (3, 1.0)]);
    }

    #[test]
    fn rank_bands() {
        let o = oracle_abcd();
        assert_eq!(missed_by_rank_band(&[(key(1), 4)], &o, 4, 2), vec![1, 2]);
    }

    proptest! {
        #[test]
        fn rates_bounded_and_scaled(stream in prop::collection::vec(0u32..30, 1..300),
                                    picks in prop::collection::vec(0u32..30, 0..40),
                                    k in 1usize..15) {
            let o = ExactCounts::from_records(&records(&stream.iter().map(|s| key(*s)).collect::<Vec<_>>()));
            // Sketches only ever report keys seen in the interval.
            let mut rep: Vec<FlowKey> = picks.iter().map(|p| key(*p)).filter(|k| o.count(k) > 0).collect();
            rep.sort();
            rep.dedup();
            let fnr = false_negative_rate(&rep, &o, k);
            let fpr = false_positive_rate(&rep, &o, k);
            prop_assert!((0.0..=1.0).contains(&fnr));
            prop_assert!((0.0..=1.0).contains(&fpr));
            let kk = k.min(o.num_flows());
            let heavy: HashSet<_> = o.top_k(k).iter().map(|e| e.0).collect();
            if rep.len() == kk && o.num_flows() > kk {
                // Every wrong report displaces one heavy flow.
                let fn_count = fnr * kk as f64;
                let fp_count = fpr * (o.num_flows() - kk) as f64;
                prop_assert!((fn_count - fp_count).abs() < 1e-9);
                prop_assert_eq!(heavy.len(), kk);
            }
        }
    }
}
