//! Seeded random streams.
//!
//! Every random draw in the crate comes from a [`SimRng`] (ChaCha8) whose seed
//! is derived from a master seed and a list of integer keys with SplitMix64.
//! Keying by (master, purpose, index, ...) instead of sharing one generator makes
//! results independent of thread scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Key tags that separate independent uses of the same master seed.
pub mod tag {
    pub const EPISODE: u64 = 0x4550_4953;
    pub const ROLLOUT: u64 = 0x524f_4c4c;
    pub const SPLIT: u64 = 0x5350_4c54;
    pub const THREAD: u64 = 0x5448_5244;
    pub const TRAIN: u64 = 0x5452_4e44;
    pub const EVAL: u64 = 0x4556_414c;
    pub const TEST: u64 = 0x5445_5354;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a 64-bit seed from a master seed and a key path.
pub fn derive_seed(master: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(master), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(master: u64, keys: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, keys))
}

/// A unit-rate exponential draw, `-ln(1 - u)` with `u` uniform in `[0, 1)`.
pub fn unit_exponential<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    -(1.0 - u).ln()
}

/// Fill `row` with a flat Dirichlet draw: independent unit exponentials, normalized.
pub fn dirichlet_flat<R: Rng + ?Sized>(rng: &mut R, row: &mut [f64]) {
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = unit_exponential(rng);
        total += *x;
    }
    if total > 0.0 {
        row.iter_mut().for_each(|x| *x /= total);
    } else {
        // every draw was exactly zero; fall back to the barycentre
        let n = row.len() as f64;
        row.iter_mut().for_each(|x| *x = 1.0 / n);
    }
}

/// Inverse-CDF draw from unnormalized non-negative weights with one uniform.
///
/// Returns `None` when the weights have no mass.
pub fn sample_weighted<R: Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let u: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = Some(i);
            acc += w;
            if u < acc {
                return Some(i);
            }
        }
    }
    last_positive
}
