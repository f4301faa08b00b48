//! Counter-based seed splitting.
//!
//! Every random stream in the crate is keyed by a base seed plus a path of
//! integer tags (run, step, sensor, sweep, index...). Streams are therefore
//! independent of evaluation order, which is what makes parallel evaluation
//! reproducible.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Mixes `tags` into `base`, one SplitMix64 step per tag.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(base, |acc, &tag| {
        SplitMix64::seed_from_u64(acc ^ tag.wrapping_add(1).wrapping_mul(GOLDEN)).next_u64()
    })
}
