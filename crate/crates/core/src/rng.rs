//! Seed splitting.
//!
//! Every random stream in a run is derived from one global seed as
//! `seed XOR fnv1a64(role)`, where `role` is a stable string such as
//! `"init.f_s.layer1"` or `"rollout.17"`. Streams are ChaCha8.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// 64-bit FNV-1a over the UTF-8 bytes of `role`.
pub fn role_hash(role: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in role.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn derive_seed(seed: u64, role: &str) -> u64 {
    seed ^ role_hash(role)
}

pub fn stream(seed: u64, role: &str) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, role))
}
