//! Counter-based seed derivation.
//!
//! Every stochastic component derives its RNG from a base seed plus a list of
//! tag words (study id, sample size, trial index, ...). Trials seeded this way
//! are independent of evaluation order, so parallel studies produce the same
//! numbers as sequential ones.

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a sub-seed from `base` and a sequence of tag words.
///
/// The same `(base, tags)` always yields the same seed; distinct tag
/// sequences yield (with overwhelming probability) distinct streams.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(base);
    for &tag in tags {
        state = splitmix64(state ^ splitmix64(tag.wrapping_add(0xA076_1D64_78BD_642F)));
    }
    state
}
