//! Flow keys, packet records, trace intervals and the exact-count oracle.
//!
//! Every sketch in this crate is judged against [`ExactCounts`], a full
//! per-flow count of one interval.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Longest encoded key (5-tuple: 4 + 4 + 1 + 2 + 2 bytes).
pub const MAX_KEY_LEN: usize = 13;

/// Protocol byte substituted when a 5-tuple is entirely zero, so that no real
/// packet encodes to the all-zero sentinel key.
pub const ZERO_TUPLE_PROTO: u8 = 0xFF;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    #[default]
    FiveTuple,
    /// Ordered (source, destination) address pair.
    IpPair,
    SrcIp,
}

impl Granularity {
    pub const fn key_len(self) -> usize {
        match self {
            Granularity::FiveTuple => 13,
            Granularity::IpPair => 8,
            Granularity::SrcIp => 4,
        }
    }

    pub const fn as_str(self) -> &'static str {
        match self {
            Granularity::FiveTuple => "five-tuple",
            Granularity::IpPair => "ip-pair",
            Granularity::SrcIp => "src-ip",
        }
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "five-tuple" | "5-tuple" | "5tuple" => Ok(Granularity::FiveTuple),
            "ip-pair" | "ippair" => Ok(Granularity::IpPair),
            "src-ip" | "srcip" => Ok(Granularity::SrcIp),
            other => Err(Error::config(format!("unknown granularity `{other}`"))),
        }
    }
}

/// Decoded header fields of an IPv4 packet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FiveTuple {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub proto: u8,
    pub sport: u16,
    pub dport: u16,
}

impl FiveTuple {
    pub const fn new(src: Ipv4Addr, dst: Ipv4Addr, proto: u8, sport: u16, dport: u16) -> Self {
        Self {
            src,
            dst,
            proto,
            sport,
            dport,
        }
    }

    /// The tuple with every field not covered by `granularity` zeroed.
    pub fn masked(&self, granularity: Granularity) -> FiveTuple {
        let zero = Ipv4Addr::UNSPECIFIED;
        match granularity {
            Granularity::FiveTuple => *self,
            Granularity::IpPair => FiveTuple::new(self.src, self.dst, 0, 0, 0),
            Granularity::SrcIp => FiveTuple::new(self.src, zero, 0, 0, 0),
        }
    }
}

/// Canonical flow identifier: a fixed-length byte string whose length is a
/// function of the granularity alone. Unused trailing bytes are always zero,
/// so derived equality and hashing are canonical.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct FlowKey {
    granularity: Granularity,
    bytes: [u8; MAX_KEY_LEN],
}

impl FlowKey {
    pub fn from_tuple(tuple: &FiveTuple, granularity: Granularity) -> FlowKey {
        let mut bytes = [0u8; MAX_KEY_LEN];
        bytes[0..4].copy_from_slice(&tuple.src.octets());
        match granularity {
            Granularity::SrcIp => {}
            Granularity::IpPair => bytes[4..8].copy_from_slice(&tuple.dst.octets()),
            Granularity::FiveTuple => {
                bytes[4..8].copy_from_slice(&tuple.dst.octets());
                bytes[8] = tuple.proto;
                bytes[9..11].copy_from_slice(&tuple.sport.to_be_bytes());
                bytes[11..13].copy_from_slice(&tuple.dport.to_be_bytes());
                if bytes.iter().all(|&b| b == 0) {
                    bytes[8] = ZERO_TUPLE_PROTO;
                }
            }
        }
        FlowKey { granularity, bytes }
    }

    /// Rebuild a key from its encoded bytes; the length must match the
    /// granularity exactly.
    pub fn from_bytes(granularity: Granularity, raw: &[u8]) -> Result<FlowKey> {
        if raw.len() != granularity.key_len() {
            return Err(Error::Format(format!(
                "{granularity} key must be {} bytes, got {}",
                granularity.key_len(),
                raw.len()
            )));
        }
        let mut bytes = [0u8; MAX_KEY_LEN];
        bytes[..raw.len()].copy_from_slice(raw);
        Ok(FlowKey { granularity, bytes })
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes[..self.granularity.key_len()]
    }

    /// True only for the reserved empty-slot key.
    pub fn is_sentinel(&self) -> bool {
        self.as_bytes().iter().all(|&b| b == 0)
    }

    /// Decode back to header fields; fields outside the granularity are zero.
    pub fn to_tuple(&self) -> FiveTuple {
        let b = &self.bytes;
        let ip = |o: usize| Ipv4Addr::new(b[o], b[o + 1], b[o + 2], b[o + 3]);
        FiveTuple {
            src: ip(0),
            dst: ip(4),
            proto: b[8],
            sport: u16::from_be_bytes([b[9], b[10]]),
            dport: u16::from_be_bytes([b[11], b[12]]),
        }
    }
}

impl Ord for FlowKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.as_bytes()
            .cmp(other.as_bytes())
            .then(self.granularity.cmp(&other.granularity))
    }
}

impl PartialOrd for FlowKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Serialize, Deserialize)]
struct FlowKeyRepr {
    granularity: Granularity,
    key: String,
}

impl Serialize for FlowKey {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        FlowKeyRepr {
            granularity: self.granularity,
            key: hex::encode(self.as_bytes()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FlowKey {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = FlowKeyRepr::deserialize(d)?;
        let raw = hex::decode(&repr.key).map_err(D::Error::custom)?;
        FlowKey::from_bytes(repr.granularity, &raw).map_err(D::Error::custom)
    }
}

impl fmt::Debug for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FlowKey({self})")
    }
}

impl fmt::Display for FlowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.to_tuple();
        match self.granularity {
            Granularity::SrcIp => write!(f, "{}", t.src),
            Granularity::IpPair => write!(f, "{}->{}", t.src, t.dst),
            Granularity::FiveTuple => write!(
                f,
                "{}:{}->{}:{}/{}",
                t.src, t.sport, t.dst, t.dport, t.proto
            ),
        }
    }
}

/// One packet event.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PacketRecord {
    pub key: FlowKey,
    /// 1 when counting packets, the packet length when counting bytes.
    pub weight: u64,
    /// 0-based position in the source trace.
    pub seq: u64,
    /// Capture time in seconds, when the source has one.
    pub ts: Option<f64>,
}

impl PacketRecord {
    pub fn new(key: FlowKey, weight: u64, seq: u64) -> Self {
        debug_assert!(weight >= 1, "packet weight must be positive");
        Self {
            key,
            weight,
            seq,
            ts: None,
        }
    }

    pub fn with_ts(mut self, ts: f64) -> Self {
        self.ts = Some(ts);
        self
    }
}

/// A contiguous chunk of a trace, processed with freshly zeroed tables.
#[derive(Clone, Debug, Default)]
pub struct TraceInterval {
    pub interval_id: usize,
    pub records: Vec<PacketRecord>,
}

impl TraceInterval {
    pub fn new(interval_id: usize, records: Vec<PacketRecord>) -> Result<Self> {
        check_seq(&records)?;
        Ok(Self {
            interval_id,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

fn check_seq(records: &[PacketRecord]) -> Result<()> {
    for (i, w) in records.windows(2).enumerate() {
        if w[1].seq <= w[0].seq {
            return Err(Error::Format(format!(
                "sequence numbers must strictly increase (record {} has seq {} after {})",
                i + 1,
                w[1].seq,
                w[0].seq
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ChunkMode {
    ByCount(usize),
    /// Fixed-length windows measured from the first record's timestamp.
    ByTime(f64),
}

/// Split a trace into intervals. Concatenating the result reproduces the
/// input; the last interval may be short.
pub fn chunk_trace(records: Vec<PacketRecord>, mode: ChunkMode) -> Result<Vec<TraceInterval>> {
    check_seq(&records)?;
    let mut out = Vec::new();
    match mode {
        ChunkMode::ByCount(0) => return Err(Error::config("chunk size must be at least 1")),
        ChunkMode::ByCount(n) => {
            let mut it = records.into_iter().peekable();
            while it.peek().is_some() {
                let chunk: Vec<_> = it.by_ref().take(n).collect();
                out.push(TraceInterval {
                    interval_id: out.len(),
                    records: chunk,
                });
            }
        }
        ChunkMode::ByTime(secs) => {
            if !secs.is_finite() || secs <= 0.0 {
                return Err(Error::config("chunk length in seconds must be positive"));
            }
            let Some(first) = records.first() else {
                return Ok(out);
            };
            let origin = first
                .ts
                .ok_or_else(|| Error::config("time-based chunking requires timestamps"))?;
            let mut current: Vec<PacketRecord> = Vec::new();
            let mut window = 0i64;
            for rec in records {
                let ts = rec
                    .ts
                    .ok_or_else(|| Error::config("time-based chunking requires timestamps"))?;
                let w = ((ts - origin) / secs).floor() as i64;
                if w != window && !current.is_empty() {
                    out.push(TraceInterval {
                        interval_id: out.len(),
                        records: std::mem::take(&mut current),
                    });
                }
                window = w;
                current.push(rec);
            }
            if !current.is_empty() {
                out.push(TraceInterval {
                    interval_id: out.len(),
                    records: current,
                });
            }
        }
    }
    Ok(out)
}

/// Split a trace into `parts` intervals whose lengths differ by at most one.
pub fn split_even(records: Vec<PacketRecord>, parts: usize) -> Result<Vec<TraceInterval>> {
    if parts == 0 {
        return Err(Error::config("cannot split a trace into zero parts"));
    }
    check_seq(&records)?;
    let n = records.len();
    let parts = parts.min(n.max(1));
    let (base, extra) = (n / parts, n % parts);
    let mut it = records.into_iter();
    Ok((0..parts)
        .map(|i| TraceInterval {
            interval_id: i,
            records: it.by_ref().take(base + usize::from(i < extra)).collect(),
        })
        .collect())
}

/// Ranking used by every report: larger count first, then ascending key bytes.
pub fn rank_order(a: &(FlowKey, u64), b: &(FlowKey, u64)) -> Ordering {
    b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0))
}

/// Exact per-flow counts for one interval.
#[derive(Clone, Debug, Default)]
pub struct ExactCounts {
    counts: HashMap<FlowKey, u64>,
    total: u64,
    ranked: OnceLock<Vec<(FlowKey, u64)>>,
}

impl ExactCounts {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a PacketRecord>) -> Self {
        let mut oracle = ExactCounts::default();
        for r in records {
            oracle.add(r.key, r.weight);
        }
        oracle
    }

    pub fn from_interval(interval: &TraceInterval) -> Self {
        Self::from_records(&interval.records)
    }

    pub fn add(&mut self, key: FlowKey, weight: u64) {
        *self.counts.entry(key).or_default() += weight;
        self.total += weight;
        self.ranked = OnceLock::new();
    }

    pub fn count(&self, key: &FlowKey) -> u64 {
        self.counts.get(key).copied().unwrap_or(0)
    }

    /// Total weight `C` of the interval.
    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn num_flows(&self) -> usize {
        self.counts.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FlowKey, &u64)> {
        self.counts.iter()
    }

    /// All flows in [`rank_order`].
    pub fn ranked(&self) -> &[(FlowKey, u64)] {
        self.ranked.get_or_init(|| {
            let mut v: Vec<_> = self.counts.iter().map(|(k, c)| (*k, *c)).collect();
            v.sort_unstable_by(rank_order);
            v
        })
    }

    pub fn top_k(&self, k: usize) -> &[(FlowKey, u64)] {
        let r = self.ranked();
        &r[..k.min(r.len())]
    }

    /// Count of the k-th heaviest flow (1-based), if the interval has that many flows.
    pub fn kth_count(&self, k: usize) -> Option<u64> {
        k.checked_sub(1)
            .and_then(|i| self.ranked().get(i))
            .map(|e| e.1)
    }
}

/// The k heaviest flows of an interval, heaviest first.
pub fn exact_topk(interval: &TraceInterval, k: usize) -> Vec<(FlowKey, u64)> {
    assert!(k >= 1, "k must be at least 1");
    ExactCounts::from_interval(interval).top_k(k).to_vec()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn key(n: u32) -> FlowKey {
        let t = FiveTuple::new(Ipv4Addr::from(n), Ipv4Addr::new(10, 0, 0, 1), 6, 1000, 80);
        FlowKey::from_tuple(&t, Granularity::FiveTuple)
    }

    pub(crate) fn records(keys: &[FlowKey]) -> Vec<PacketRecord> {
        keys.iter()
            .enumerate()
            .map(|(i, k)| PacketRecord::new(*k, 1, i as u64))
            .collect()
    }

    fn interval(keys: &[FlowKey]) -> TraceInterval {
        TraceInterval::new(0, records(keys)).unwrap()
    }

    #[test]
    fn topk_counts() {
        let (a, b) = (key(1), key(2));
        assert_eq!(exact_topk(&interval(&[a, a, b]), 1), vec![(a, 2)]);
    }

    #[test]
    fn topk_tie_breaks_on_key_bytes() {
        let (a, b) = (key(1), key(2));
        assert_eq!(exact_topk(&interval(&[b, a]), 1), vec![(a, 1)]);
    }

    #[test]
    fn topk_short_and_empty() {
        assert!(exact_topk(&interval(&[]), 3).is_empty());
        assert_eq!(exact_topk(&interval(&[key(1)]), 3).len(), 1);
    }

    #[test]
    fn key_lengths() {
        let t = FiveTuple::new(Ipv4Addr::new(1, 2, 3, 4), Ipv4Addr::new(5, 6, 7, 8), 17, 53, 9);
        for g in [Granularity::FiveTuple, Granularity::IpPair, Granularity::SrcIp] {
            assert_eq!(FlowKey::from_tuple(&t, g).as_bytes().len(), g.key_len());
        }
        let k = FlowKey::from_tuple(&t, Granularity::FiveTuple);
        assert_eq!(k.as_bytes(), &[1, 2, 3, 4, 5, 6, 7, 8, 17, 0, 53, 0, 9]);
    }

    #[test]
    fn zero_tuple_never_encodes_to_sentinel() {
        let z = Ipv4Addr::UNSPECIFIED;
        let k = FlowKey::from_tuple(&FiveTuple::new(z, z, 0, 0, 0), Granularity::FiveTuple);
        assert!(!k.is_sentinel());
        assert_eq!(k.to_tuple().proto, ZERO_TUPLE_PROTO);
        assert!(FlowKey::default().is_sentinel());
    }

    #[test]
    fn from_bytes_checks_length() {
        assert!(FlowKey::from_bytes(Granularity::SrcIp, &[1, 2, 3]).is_err());
        let k = FlowKey::from_bytes(Granularity::SrcIp, &[1, 2, 3, 4]).unwrap();
        assert_eq!(k.to_string(), "1.2.3.4");
    }

    #[test]
    fn chunk_by_count() {
        let recs = records(&vec![key(1); 25]);
        let sizes: Vec<_> = chunk_trace(recs, ChunkMode::ByCount(10))
            .unwrap()
            .iter()
            .map(|i| i.len())
            .collect();
        assert_eq!(sizes, [10, 10, 5]);

        let recs = records(&[key(1); 10]);
        let chunks = chunk_trace(recs, ChunkMode::ByCount(100)).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].len(), 10);
    }

    #[test]
    fn chunk_by_time_fixture() {
        // Hand split: [0.0, 0.4, 0.99] [1.0] [2.5]
        let ts = [0.0, 0.4, 0.99, 1.0, 2.5];
        let recs: Vec<_> = records(&[key(1); 5])
            .into_iter()
            .zip(ts)
            .map(|(r, t)| r.with_ts(t))
            .collect();
        let chunks = chunk_trace(recs, ChunkMode::ByTime(1.0)).unwrap();
        let seqs: Vec<Vec<u64>> = chunks
            .iter()
            .map(|c| c.records.iter().map(|r| r.seq).collect())
            .collect();
        assert_eq!(seqs, vec![vec![0, 1, 2], vec![3], vec![4]]);
    }

    #[test]
    fn chunk_by_time_requires_timestamps() {
        let err = chunk_trace(records(&[key(1); 3]), ChunkMode::ByTime(1.0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn chunk_rejects_unordered_seq() {
        let mut recs = records(&[key(1); 3]);
        recs[2].seq = 0;
        assert!(chunk_trace(recs, ChunkMode::ByCount(2)).is_err());
    }

    #[test]
    fn split_even_sizes() {
        let sizes: Vec<_> = split_even(records(&[key(1); 25]), 10)
            .unwrap()
            .iter()
            .map(|i| i.len())
            .collect();
        assert_eq!(sizes, [3, 3, 3, 3, 3, 2, 2, 2, 2, 2]);
    }

    #[test]
    fn key_serde_round_trip() {
        let k = key(7);
        let json = serde_json::to_string(&k).unwrap();
        assert_eq!(json, r#"{"granularity":"five-tuple","key":"000000070a0000010603e80050"}"#);
        assert_eq!(serde_json::from_str::<FlowKey>(&json).unwrap(), k);
        assert!(serde_json::from_str::<FlowKey>(r#"{"granularity":"src-ip","key":"01"}"#).is_err());
    }

    fn arb_tuple() -> impl Strategy<Value = FiveTuple> {
        (any::<u32>(), any::<u32>(), any::<u8>(), any::<u16>(), any::<u16>()).prop_map(
            |(s, d, p, sp, dp)| FiveTuple::new(s.into(), d.into(), p, sp, dp),
        )
    }

    proptest! {
        #[test]
        fn key_round_trip(t in arb_tuple()) {
            prop_assume!(t != FiveTuple::new(0.into(), 0.into(), 0, 0, 0));
            for g in [Granularity::FiveTuple, Granularity::IpPair, Granularity::SrcIp] {
                let k = FlowKey::from_tuple(&t, g);
                prop_assert_eq!(k.to_tuple(), t.masked(g));
                prop_assert_eq!(FlowKey::from_bytes(g, k.as_bytes()).unwrap(), k);
            }
        }

        #[test]
        fn conservation_and_prefix(stream in prop::collection::vec(0u32..40, 0..300),
                                   weights in prop::collection::vec(1u64..5, 300),
                                   k1 in 1usize..20, extra in 0usize..20) {
            let recs: Vec<_> = stream.iter().zip(&weights).enumerate()
                .map(|(i, (s, w))| PacketRecord::new(key(*s), *w, i as u64)).collect();
            let oracle = ExactCounts::from_records(&recs);
            let weight_sum: u64 = recs.iter().map(|r| r.weight).sum();
            prop_assert_eq!(oracle.total(), weight_sum);
            prop_assert_eq!(oracle.iter().map(|(_, c)| *c).sum::<u64>(), weight_sum);
            let small = oracle.top_k(k1).to_vec();
            let big = oracle.top_k(k1 + extra);
            prop_assert_eq!(&big[..small.len()], &small[..]);
        }
    }
}
