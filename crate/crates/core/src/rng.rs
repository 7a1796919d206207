//! Deterministic random streams.
//!
//! Every stochastic component draws from a ChaCha8 generator seeded with the
//! run seed and switched to a stream id derived from a purpose label (and an
//! optional index). The stream id is the 64-bit FNV-1a hash of the label bytes
//! followed by the little-endian index bytes, so the mapping is stable across
//! platforms and releases.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: impl IntoIterator<Item = u8>, mut hash: u64) -> u64 {
    for b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// Stream id for `(label, index)`.
pub fn stream_id(label: &str, index: u64) -> u64 {
    let h = fnv1a(label.bytes(), FNV_OFFSET);
    fnv1a(index.to_le_bytes(), h)
}

/// Generator for the stream `(seed, label, index)`.
pub fn stream(seed: u64, label: &str, index: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(label, index));
    rng
}
