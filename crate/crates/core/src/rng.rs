//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator whose seed is
//! derived from a base seed plus a tuple of integer keys (walk start, epoch,
//! batch, ...). Streams keyed this way are independent of iteration order and
//! thread count, which is what makes parallel generation reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `keys` into `base`, order-sensitively.
pub fn derive(base: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(base), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Seed for a named pipeline stage (`"split"`, `"corpus"`, ...).
pub fn module_seed(base: u64, name: &str) -> u64 {
    // FNV-1a over the name keeps the derivation stable across toolchains.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    derive(base, &[h])
}

pub fn stream(base: u64, keys: &[u64]) -> Rng {
    Rng::seed_from_u64(derive(base, keys))
}

/// Uniform `[0, 1)` value that is a pure function of its keys.
pub fn hash_unit(base: u64, keys: &[u64]) -> f64 {
    (derive(base, keys) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
