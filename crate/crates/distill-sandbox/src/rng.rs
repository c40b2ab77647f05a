//! Deterministic random streams.
//!
//! Every sampling site in the crate draws from a stream derived from
//! `(seed, domain, index)`. Streams with different domains or indices are
//! statistically independent, so reordering or parallelizing work never
//! changes what any one consumer sees. Domain strings double as a seed
//! namespace: evaluation data uses different domains than training data, so
//! the two can never collide even under the same numeric seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derives an independent ChaCha8 stream for `(seed, domain, index)`.
pub fn stream(seed: u64, domain: &str, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(domain.as_bytes()).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// FNV-1a, used only to spread domain strings across the key space.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Samples an index from an explicit probability vector.
///
/// The vector must sum to 1 up to rounding; the final positive entry absorbs
/// any float droop so the draw always lands on a positive-probability index.
pub fn sample_categorical(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc && p > 0.0 {
            return i;
        }
    }
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .expect("categorical draw from an all-zero vector")
}

/// Fisher-Yates draw of `m` distinct values from `0..n`.
pub fn sample_distinct(rng: &mut impl Rng, n: usize, m: usize) -> Vec<usize> {
    assert!(m <= n, "cannot draw {m} distinct values from 0..{n}");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(m);
    pool
}

/// Seeded in-place shuffle of `0..n`, used for epoch ordering.
pub fn shuffled_indices(seed: u64, domain: &str, index: u64, n: usize) -> Vec<usize> {
    let mut rng = stream(seed, domain, index);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}
