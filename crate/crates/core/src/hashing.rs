//! Per-stage hash family `h_i(x) = ((a_i * x + b_i) mod p) mod size_i`.
//!
//! `p` is the Mersenne prime 2^61 - 1. Keys are folded to a 64-bit `x` by
//! splitting the key bytes into little-endian 8-byte chunks (the last one
//! zero-padded) and XOR-ing them together. Multipliers are odd and pairwise
//! coprime across stages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowKey;

pub const MERSENNE_61: u64 = (1 << 61) - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageHash {
    pub a: u64,
    pub b: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashFamily {
    params: Vec<StageHash>,
    stage_sizes: Vec<usize>,
}

/// XOR-fold the key bytes into one 64-bit word.
pub fn fold_bytes(bytes: &[u8]) -> u64 {
    bytes.chunks(8).fold(0u64, |acc, chunk| {
        let mut word = [0u8; 8];
        word[..chunk.len()].copy_from_slice(chunk);
        acc ^ u64::from_le_bytes(word)
    })
}

/// `v mod (2^61 - 1)` for any 128-bit `v` below 2^125.
#[inline]
pub fn mod_mersenne(v: u128) -> u64 {
    let p = MERSENNE_61 as u128;
    let mut r = (v & p) + (v >> 61);
    r = (r & p) + (r >> 61);
    if r >= p {
        r -= p;
    }
    r as u64
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Split `m` slots over `d` stages; the first `m mod d` stages get one extra.
pub fn split_slots(m: usize, d: usize) -> Result<Vec<usize>> {
    if d == 0 {
        return Err(Error::config("at least one stage is required"));
    }
    if m < d {
        return Err(Error::config(format!(
            "{m} slots cannot fill {d} stages (each stage needs at least one slot)"
        )));
    }
    let (base, extra) = (m / d, m % d);
    Ok((0..d).map(|i| base + usize::from(i < extra)).collect())
}

impl HashFamily {
    /// Draw one function per entry of `stage_sizes` from `seed`.
    pub fn new(seed: u64, stage_sizes: Vec<usize>) -> Self {
        assert!(stage_sizes.iter().all(|&s| s > 0), "stage sizes must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: Vec<StageHash> = Vec::with_capacity(stage_sizes.len());
        while params.len() < stage_sizes.len() {
            let a = rng.random_range(1..MERSENNE_61) | 1;
            if a >= MERSENNE_61 || params.iter().any(|p| gcd(p.a, a) > 1) {
                continue;
            }
            let b = rng.random_range(0..MERSENNE_61);
            params.push(StageHash { a, b });
        }
        Self {
            params,
            stage_sizes,
        }
    }

    /// Build from explicit parameters, validating ranges and coprimality.
    pub fn from_params(params: Vec<StageHash>, stage_sizes: Vec<usize>) -> Result<Self> {
        if params.len() != stage_sizes.len() {
            return Err(Error::config("one hash parameter pair is needed per stage"));
        }
        if stage_sizes.contains(&0) {
            return Err(Error::config("stage sizes must be positive"));
        }
        for (i, p) in params.iter().enumerate() {
            if p.a == 0 || p.a >= MERSENNE_61 || p.b >= MERSENNE_61 {
                return Err(Error::config(format!("hash parameters of stage {i} out of range")));
            }
            if params[..i].iter().any(|q| gcd(q.a, p.a) > 1) {
                return Err(Error::config(format!(
                    "multiplier of stage {i} is not coprime with an earlier stage"
                )));
            }
        }
        Ok(Self {
            params,
            stage_sizes,
        })
    }

    pub fn stages(&self) -> usize {
        self.params.len()
    }

    pub fn stage_sizes(&self) -> &[usize] {
        &self.stage_sizes
    }

    pub fn params(&self) -> &[StageHash] {
        &self.params
    }

    /// Hash a pre-folded value into stage `stage`.
    #[inline]
    pub fn index_of_value(&self, stage: usize, x: u64) -> usize {
        let StageHash { a, b } = self.params[stage];
        let h = mod_mersenne(a as u128 * x as u128 + b as u128);
        (h % self.stage_sizes[stage] as u64) as usize
    }

    /// Slot of `key` in stage `stage`. Panics if `stage` is out of range.
    #[inline]
    pub fn index(&self, stage: usize, key: &FlowKey) -> usize {
        assert!(stage < self.stages(), "stage {stage} out of range");
        self.index_of_value(stage, fold_bytes(key.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{FiveTuple, Granularity};
    use proptest::prelude::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    use rand::Rng;

    fn random_key(rng: &mut ChaCha8Rng) -> FlowKey {
        let t = FiveTuple::new(
            rng.random::<u32>().into(),
            rng.random::<u32>().into(),
            rng.random(),
            rng.random(),
            rng.random(),
        );
        FlowKey::from_tuple(&t, Granularity::FiveTuple)
    }

    #[test]
    fn identity_hash() {
        let f = HashFamily::from_params(vec![StageHash { a: 1, b: 0 }], vec![16]).unwrap();
        assert_eq!(f.index_of_value(0, 37), 5);
    }

    #[test]
    fn fold_is_little_endian_xor() {
        assert_eq!(fold_bytes(&[37]), 37);
        let mut bytes = [0u8; 13];
        bytes[0] = 1;
        bytes[8] = 1;
        assert_eq!(fold_bytes(&bytes), 0);
        bytes[9] = 2;
        assert_eq!(fold_bytes(&bytes), 0x200);
    }

    #[test]
    fn deterministic_under_seed() {
        let f1 = HashFamily::new(42, vec![64; 6]);
        let f2 = HashFamily::new(42, vec![64; 6]);
        assert_eq!(f1, f2);
        assert_ne!(f1.params(), HashFamily::new(43, vec![64; 6]).params());
        let k = crate::flow::tests::key(99);
        assert_eq!(f1.index(3, &k), f1.index(3, &k));
    }

    #[test]
    fn params_are_valid() {
        let f = HashFamily::new(7, vec![10; 16]);
        for (i, p) in f.params().iter().enumerate() {
            assert!(p.a >= 1 && p.a < MERSENNE_61 && p.a % 2 == 1);
            assert!(p.b < MERSENNE_61);
            for q in &f.params()[..i] {
                assert_eq!(gcd(p.a, q.a), 1);
            }
        }
    }

    #[test]
    fn from_params_rejects_shared_factor() {
        let p = vec![StageHash { a: 3, b: 0 }, StageHash { a: 9, b: 1 }];
        assert!(HashFamily::from_params(p, vec![4, 4]).is_err());
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn stage_out_of_range_panics() {
        HashFamily::new(1, vec![4]).index(1, &FlowKey::default());
    }

    #[test]
    fn split_slots_layout() {
        assert_eq!(split_slots(10, 3).unwrap(), vec![4, 3, 3]);
        assert_eq!(split_slots(12, 6).unwrap(), vec![2; 6]);
        assert!(split_slots(2, 3).is_err());
        assert!(split_slots(5, 0).is_err());
    }

    #[test]
    fn chi_squared_uniformity() {
        let f = HashFamily::new(2024, vec![256]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut buckets = vec![0u64; 256];
        for _ in 0..n {
            buckets[f.index(0, &random_key(&mut rng))] += 1;
        }
        let expected = n as f64 / 256.0; // 390.6
        let stat: f64 = buckets
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        let critical = ChiSquared::new(255.0).unwrap().inverse_cdf(0.999);
        assert!(stat < critical, "chi2 = {stat}, critical = {critical}");
    }

    #[test]
    fn chi_squared_stage_independence() {
        let f = HashFamily::new(99, vec![8, 8]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 64_000;
        let mut joint = [[0u64; 8]; 8];
        for _ in 0..n {
            let k = random_key(&mut rng);
            joint[f.index(0, &k)][f.index(1, &k)] += 1;
        }
        let rows: Vec<u64> = joint.iter().map(|r| r.iter().sum()).collect();
        let cols: Vec<u64> = (0..8).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
        let mut stat = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                let e = rows[i] as f64 * cols[j] as f64 / n as f64;
                stat += (joint[i][j] as f64 - e).powi(2) / e;
            }
        }
        let critical = ChiSquared::new(49.0).unwrap().inverse_cdf(0.999);
        assert!(stat < critical, "chi2 = {stat}, critical = {critical}");
    }

    proptest! {
        #[test]
        fn mersenne_matches_modulo(a in 1u64..MERSENNE_61, b in 0u64..MERSENNE_61, x in any::<u64>()) {
            let v = a as u128 * x as u128 + b as u128;
            prop_assert_eq!(mod_mersenne(v) as u128, v % MERSENNE_61 as u128);
        }

        #[test]
        fn index_in_range(seed in any::<u64>(), size in 1usize..5000, x in any::<u64>()) {
            let f = HashFamily::new(seed, vec![size]);
            prop_assert!(f.index_of_value(0, x) < size);
        }
    }
}
