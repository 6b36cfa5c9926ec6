//! Seeded draws on top of SplitMix64.
//!
//! `u` is the top 53 bits of a 64-bit output scaled into [0, 1). Exponential
//! draws use inversion, `-ln(1 - u) / rate`; bounded integers use
//! `floor(u * n)`. Anyone reproducing a stream needs only these three rules.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

pub struct Rng(SplitMix64);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng(SplitMix64::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn exponential(&mut self, rate: f64) -> f64 {
        -(1.0 - self.uniform()).ln() / rate
    }

    /// Integer in `[0, n)`.
    pub fn below(&mut self, n: u64) -> u64 {
        ((self.uniform() * n as f64) as u64).min(n.saturating_sub(1))
    }
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use proptest::prelude::*;

    #[test]
    fn splitmix_golden_stream() {
        // seed 42, from an independent implementation of the published mixer
        let want: [u64; 10] = [
            13679457532755275413,
            2949826092126892291,
            5139283748462763858,
            6349198060258255764,
            701532786141963250,
            16015981125662989062,
            4028864712777624925,
            14769051326987775908,
            6270620877612482005,
            11408980392250668974,
        ];
        let mut r = Rng::new(42);
        let got: Vec<u64> = (0..10).map(|_| r.next_u64()).collect();
        assert_eq!(got, want);
    }

    proptest! {
        #[test]
        fn draws_stay_in_range(seed in any::<u64>(), n in 1u64..1000) {
            let mut r = Rng::new(seed);
            for _ in 0..64 {
                let u = r.uniform();
                prop_assert!((0.0..1.0).contains(&u));
                prop_assert!(r.below(n) < n);
                prop_assert!(r.exponential(3.0) >= 0.0);
            }
        }
    }
}
