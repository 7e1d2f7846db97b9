//! Keyed random streams.
//!
//! Every stochastic decision is drawn from a stream derived from a small
//! tuple of integers (for example `(seed, epoch, example_index)`), never from
//! a shared generator, so results do not depend on evaluation order or on how
//! work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type KeyedRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a domain tag and a key tuple into one 64-bit seed.
pub fn derive_seed(domain: &str, key: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3u64;
    for b in domain.bytes() {
        h = splitmix(h ^ b as u64);
    }
    for &k in key {
        h = splitmix(h ^ k);
    }
    h
}

pub fn keyed_rng(domain: &str, key: &[u64]) -> KeyedRng {
    ChaCha8Rng::seed_from_u64(derive_seed(domain, key))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = keyed_rng("aug", &[1, 2, 3]).gen();
        let b: u64 = keyed_rng("aug", &[1, 2, 3]).gen();
        let c: u64 = keyed_rng("aug", &[1, 2, 4]).gen();
        let d: u64 = keyed_rng("crop", &[1, 2, 3]).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }
}
