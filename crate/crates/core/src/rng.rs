//! Seed derivation and the few samplers the rest of the crate shares.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// One round of splitmix64; used to fold stream identifiers into a seed.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash of a seed and a list of stream identifiers.
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix64(seed), |acc, &p| mix64(acc ^ mix64(p)))
}

/// Independent generator for the stream `(seed, parts...)`.
pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, parts))
}

/// Normal(0, std) truncated to `[-2 std, 2 std]` by rejection.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Uniformly random permutation of `0..n`.
pub fn permutation<R: Rng + ?Sized>(rng: &mut R, n: usize) -> alloc::vec::Vec<usize> {
    let mut p: alloc::vec::Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_separates_streams() {
        assert_ne!(derive(1, &[0]), derive(1, &[1]));
        assert_ne!(derive(1, &[0]), derive(2, &[0]));
        assert_eq!(derive(7, &[3, 4]), derive(7, &[3, 4]));
    }

    #[test]
    fn truncated_normal_stays_in_band() {
        let mut rng = stream(0, &[]);
        for _ in 0..10_000 {
            let x = truncated_normal(&mut rng, 0.02);
            assert!(x.abs() <= 0.04);
        }
    }

    #[test]
    fn permutation_is_a_bijection() {
        let mut rng = stream(3, &[]);
        let mut p = permutation(&mut rng, 100);
        p.sort_unstable();
        assert!(p.iter().enumerate().all(|(i, &v)| i == v));
    }
}
