use std::net::Ipv4Addr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{FiveTuple, FlowKey, Granularity, PacketRecord};

/// Synthetic trace: `packets` i.i.d. draws over flow ranks `1..=flows` with
/// `P(r)` proportional to `r^-alpha`. `alpha = 0` is uniform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZipfSpec {
    pub flows: u64,
    pub packets: u64,
    pub alpha: f64,
    pub seed: u64,
    #[serde(default)]
    pub granularity: Granularity,
}

impl ZipfSpec {
    pub fn new(flows: u64, packets: u64, alpha: f64, seed: u64) -> Self {
        Self {
            flows,
            packets,
            alpha,
            seed,
            granularity: Granularity::FiveTuple,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    fn validate(&self) -> Result<()> {
        if self.flows == 0 || self.packets == 0 {
            return Err(Error::config("Zipf trace needs at least one flow and one packet"));
        }
        if self.flows > u64::from(u32::MAX) {
            return Err(Error::config("Zipf trace supports at most 2^32 - 1 flows"));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::config(format!("Zipf exponent must be finite and >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Deterministic 5-tuple for flow rank `rank` (1-based). Distinct ranks give
/// distinct source addresses, so keys stay distinct at every granularity.
pub fn zipf_key(rank: u64, granularity: Granularity) -> FlowKey {
    let r = rank as u32;
    let t = FiveTuple::new(
        Ipv4Addr::from(0x0A00_0000u32.wrapping_add(r)),
        Ipv4Addr::new(192, 168, 0, 1),
        if r.is_multiple_of(2) { 6 } else { 17 },
        1024 + (r % 60_000) as u16,
        if r.is_multiple_of(3) { 443 } else { 80 },
    );
    FlowKey::from_tuple(&t, granularity)
}

pub struct ZipfStream {
    dist: Zipf<f64>,
    rng: ChaCha8Rng,
    granularity: Granularity,
    seq: u64,
    packets: u64,
}

impl Iterator for ZipfStream {
    type Item = PacketRecord;

    fn next(&mut self) -> Option<PacketRecord> {
        if self.seq == self.packets {
            return None;
        }
        let rank = self.dist.sample(&mut self.rng) as u64;
        let rec = PacketRecord::new(zipf_key(rank, self.granularity), 1, self.seq);
        self.seq += 1;
        Some(rec)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.packets - self.seq) as usize;
        (left, Some(left))
    }
}

impl ExactSizeIterator for ZipfStream {}

pub fn generate_zipf(spec: &ZipfSpec) -> Result<ZipfStream> {
    spec.validate()?;
    let dist = Zipf::new(spec.flows as f64, spec.alpha).map_err(|e| Error::config(e.to_string()))?;
    Ok(ZipfStream {
        dist,
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        granularity: spec.granularity,
        seq: 0,
        packets: spec.packets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::ExactCounts;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn deterministic_under_seed() {
        let spec = ZipfSpec::new(1000, 10_000, 1.0, 5);
        let a: Vec<_> = generate_zipf(&spec).unwrap().collect();
        let b: Vec<_> = generate_zipf(&spec).unwrap().collect();
        assert_eq!(a, b);
        let c: Vec<_> = generate_zipf(&spec.with_seed(6)).unwrap().collect();
        assert_ne!(a, c);
        assert_eq!(a.len(), 10_000);
        assert_eq!(a.iter().map(|r| r.weight).sum::<u64>(), 10_000);
        assert!(a.iter().enumerate().all(|(i, r)| r.seq == i as u64));
    }

    #[test]
    fn single_flow() {
        let recs: Vec<_> = generate_zipf(&ZipfSpec::new(1, 500, 1.0, 1)).unwrap().collect();
        assert_eq!(recs.len(), 500);
        assert!(recs.iter().all(|r| r.key == zipf_key(1, Granularity::FiveTuple)));
    }

    #[test]
    fn uniform_limit_passes_chi_squared() {
        let n = 100_000u64;
        let oracle = ExactCounts::from_records(&generate_zipf(&ZipfSpec::new(4, n, 0.0, 3)).unwrap().collect::<Vec<_>>());
        assert_eq!(oracle.num_flows(), 4);
        let expect = n as f64 / 4.0;
        let stat: f64 = oracle.iter().map(|(_, c)| (*c as f64 - expect).powi(2) / expect).sum();
        let crit = ChiSquared::new(3.0).unwrap().inverse_cdf(0.999);
        assert!(stat < crit, "chi2 {stat} >= {crit}");
    }

    #[test]
    fn rank_frequency_slope() {
        let recs: Vec<_> = generate_zipf(&ZipfSpec::new(10_000, 1_000_000, 1.0, 7)).unwrap().collect();
        let oracle = ExactCounts::from_records(&recs);
        let pts: Vec<(f64, f64)> = oracle
            .top_k(100)
            .iter()
            .enumerate()
            .map(|(i, (_, c))| (((i + 1) as f64).ln(), (*c as f64).ln()))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let slope = sxy / sxx;
        assert!((slope + 1.0).abs() <= 0.1, "slope {slope}");
    }

    #[test]
    fn keys_distinct_per_rank() {
        for g in [Granularity::FiveTuple, Granularity::IpPair, Granularity::SrcIp] {
            let keys: std::collections::HashSet<_> = (1..=5000).map(|r| zipf_key(r, g)).collect();
            assert_eq!(keys.len(), 5000);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_zipf(&ZipfSpec::new(0, 10, 1.0, 0)).is_err());
        assert!(generate_zipf(&ZipfSpec::new(10, 0, 1.0, 0)).is_err());
        assert!(generate_zipf(&ZipfSpec::new(10, 10, -1.0, 0)).is_err());
        assert!(generate_zipf(&ZipfSpec::new(10, 10, f64::NAN, 0)).is_err());
    }
}
