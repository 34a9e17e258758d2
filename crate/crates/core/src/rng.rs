//! Deterministic seed plumbing. Every stochastic component takes an explicit
//! seed; independent streams are derived by mixing rather than by sharing a
//! generator, so concurrent cells never race on RNG state.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Platform-stable RNG used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Build an RNG from a bare seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream from a base seed and a path of indices
/// (splitmix64 finalizer applied per component).
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    let mut s = splitmix64(base ^ 0x9e37_79b9_7f4a_7c15);
    for &p in path {
        s = splitmix64(s ^ splitmix64(p.wrapping_add(0x85eb_ca6b)));
    }
    s
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        let a = derive_seed(7, &[1, 2]);
        assert_eq!(a, derive_seed(7, &[1, 2]));
        assert_ne!(a, derive_seed(7, &[2, 1]));
        assert_ne!(a, derive_seed(8, &[1, 2]));
        assert_ne!(a, derive_seed(7, &[1]));
    }

    #[test]
    fn rng_streams_are_platform_stable() {
        use rand::Rng as _;
        let mut r = rng_from_seed(42);
        // Frozen draw: guards against accidental rand/chacha version drift.
        let v: u64 = r.gen();
        assert_eq!(v, 12578764544318200737);
    }
}
