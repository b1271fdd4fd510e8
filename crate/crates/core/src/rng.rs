//! Seed derivation for the per-client and per-sentence random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Seeds a stream from a master seed and a list of integer tags.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ 0x5851_f42d_4c95_7f2d);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x9e37_79b9_7f4a_7c15)));
    }
    h
}

/// FNV-1a over a string, used to fold user ids into seeds.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn rng_from(master: u64, tags: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, tags))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
