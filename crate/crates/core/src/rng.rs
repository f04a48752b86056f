//! Seeded random streams.
//!
//! Every stochastic draw in the crate comes from a [`ChaCha8Rng`]. A run seed is
//! fanned out to independent sub-streams by label: the generator is seeded with
//! the run seed and its ChaCha stream id is set to the FNV-1a hash of the label.
//! ChaCha is counter based, so the output is identical on every platform and the
//! full generator state can be checkpointed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// 64-bit FNV-1a.
pub fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Generator seeded with `seed` positioned on the stream named `label`.
pub fn stream(seed: u64, label: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label));
    rng
}

/// A derived 64-bit seed, for APIs that take a plain seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    use rand::RngCore;
    stream(seed, label).next_u64()
}

pub fn from_entropy() -> Rng {
    let mut seed = [0u8; 32];
    rand::fill(&mut seed);
    ChaCha8Rng::from_seed(seed)
}
