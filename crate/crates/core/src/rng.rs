//! Deterministic random streams.
//!
//! Every random draw is keyed by `(seed, path index, absolute step index)`:
//! the generator for one path step is seeded from a SplitMix64 mix of the
//! key, so values never depend on scheduling or on how many draws earlier
//! steps consumed.

use rand::SeedableRng;
use rand_pcg::Pcg64Mcg;

pub type StepRng = Pcg64Mcg;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combines a seed with a label into a new, well-mixed seed.
#[inline]
pub fn derive(seed: u64, label: u64) -> u64 {
    splitmix(splitmix(seed) ^ label.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

/// Generator for one path and one absolute time step.
#[inline]
pub fn step_rng(seed: u64, path: u64, step: u64) -> StepRng {
    StepRng::seed_from_u64(derive(derive(seed, path), step))
}

/// FNV-1a, used for stable fingerprints of textual descriptions.
pub fn fingerprint(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
