//! Seeding and substream discipline.
//!
//! Every randomized operation in this crate takes an explicit `u64` seed and
//! derives independent substreams from it with [`substream`], a counter-based
//! ChaCha8 generator keyed by `(seed, stream id)`. Stream ids are built with
//! [`mix`] so that nested scopes (view index, column index, replicate index)
//! get non-colliding streams. Parallel workers each own a substream, so the
//! draw sequence never depends on scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates structured tag values.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a scope `tag`.
///
/// Used to give each logical scope (a view, a replicate, a permutation) its
/// own seed from which further substreams can be split.
pub fn mix(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// A deterministic generator for stream `stream` under `seed`.
///
/// ChaCha8 is counter-based: each `(seed, stream)` pair indexes an
/// independent 2^64-block keystream, so substreams can be consumed in any
/// order (or in parallel) without affecting one another.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
