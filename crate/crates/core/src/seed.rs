//! Stable seed derivation.
//!
//! Every random stream in the crate is derived from one root seed by hashing
//! `(root, label, index)`. The hash is FNV-1a followed by a splitmix64
//! finalizer, so derived seeds do not change between Rust releases the way
//! `DefaultHasher` output may.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed for the stream named `label`, instance `index`.
pub fn derive_seed(root: u64, label: &str, index: u64) -> u64 {
    let mut h = FNV_OFFSET;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(FNV_PRIME);
        }
    };
    feed(&root.to_le_bytes());
    feed(label.as_bytes());
    feed(&[0xff]);
    feed(&index.to_le_bytes());
    splitmix64(h)
}

/// Portable, seed-deterministic generator used throughout the crate.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
