//! Deterministic random streams keyed by `(seed, a, b)`.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent ChaCha stream for `(seed, a, b)`, e.g. field index and chain
/// index. The key comes from the seed and `a`; `b` selects the stream.
pub fn stream(seed: u64, a: u64, b: u64) -> ChaCha20Rng {
    let key = splitmix64(splitmix64(seed) ^ a.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    let mut rng = ChaCha20Rng::seed_from_u64(key);
    rng.set_stream(b);
    rng
}
