//! Deterministic random streams.
//!
//! Every stochastic step draws from a ChaCha stream keyed by the run seed and a
//! tuple of tags (epoch, utterance, view, ...), so results do not depend on
//! scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream for `seed` refined by `tags`.
pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    let mut state = splitmix(seed);
    for &t in tags {
        state = splitmix(state ^ splitmix(t));
    }
    ChaCha8Rng::seed_from_u64(state)
}

/// Stable 64-bit FNV-1a hash, used to turn identifiers into stream tags.
pub fn tag(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
