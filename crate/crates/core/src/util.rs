//! Seeded RNG substreams and small numeric helpers shared across modules.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stable 64-bit FNV-1a hash. Used to derive substream keys from labels and
/// to map string ids to per-entity seeds; must never change across releases
/// (seed lineage stability is part of the reproducibility contract).
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A deterministic named substream of a base seed.
///
/// The 32-byte ChaCha key is `seed || a || b || fnv1a64(label)` (all
/// little-endian), so streams with distinct labels or indices are
/// independent and reproducible.
pub fn substream(seed: u64, label: &str, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&a.to_le_bytes());
    key[16..24].copy_from_slice(&b.to_le_bytes());
    key[24..32].copy_from_slice(&fnv1a64(label.as_bytes()).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Derives a child seed (rather than a full stream) for handing to APIs that
/// take a `u64` seed.
pub fn child_seed(seed: u64, label: &str, a: u64, b: u64) -> u64 {
    use rand_chacha::rand_core::RngCore;
    substream(seed, label, a, b).next_u64()
}

/// Arithmetic mean. Callers guarantee non-empty input.
pub fn mean(xs: &[f64]) -> f64 {
    debug_assert!(!xs.is_empty());
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance (biased, 1/n).
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Percentile with the linear-interpolation convention: for `p` in [0, 100],
/// rank `r = p/100 * (m-1)` over the ascending order statistics, interpolating
/// between the two bracketing values.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    debug_assert!((0.0..=100.0).contains(&p));
    let m = sorted.len();
    if m == 1 {
        return sorted[0];
    }
    let r = p / 100.0 * (m - 1) as f64;
    let lo = r.floor() as usize;
    let hi = r.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = r - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}

/// Sorts a copy ascending and applies [`percentile`].
pub fn percentile_of(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("non-finite value in percentile"));
    percentile(&v, p)
}

/// Neumaier-compensated summation; used where accumulation error matters
/// (log-sum-exp folds, long means).
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
