//! Seeded random streams.
//!
//! Every random quantity in the crate is drawn from a [`SeqRng`], a ChaCha20
//! stream (`rand_chacha` 0.9) seeded through `SeedableRng::seed_from_u64`.
//! The derived draws (uniform floats, bounded integers, Gaussians, subsets)
//! are implemented here rather than taken from `rand` distributions so that
//! their bit patterns cannot change under a dependency upgrade:
//!
//! * `uniform`: top 53 bits of a `u64`, scaled by 2⁻⁵³, in `[0, 1)`.
//! * `below(n)`: rejection of the lowest `2⁶⁴ mod n` values, then `x % n`.
//! * `standard_normal`: Box–Muller, both outputs used (cosine first).
//! * `choose_distinct`: partial Fisher–Yates over `0..pool`.
//!
//! Per-index streams are keyed by [`derive_seed`], a SplitMix64 mix of the
//! master seed, a domain tag and the index.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Domain tags for [`derive_seed`].
pub mod domain {
    pub const EMBEDDING: u64 = 0x454d_4245_4444_494e;
    pub const PROCESSORS: u64 = 0x5052_4f43_4553_534f;
    pub const SEQUENCE: u64 = 0x5345_5155_454e_4345;
    pub const LANGSYM: u64 = 0x4c41_4e47_5359_4d00;
    pub const STRIP: u64 = 0x5354_5249_5043_4f54;
    pub const RANDOM_BACKEND: u64 = 0x5241_4e44_4241_434b;
}

#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `splitmix64(splitmix64(master ^ domain) ^ index)`.
pub fn derive_seed(master: u64, domain: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ domain) ^ index)
}

#[derive(Debug, Clone)]
pub struct SeqRng {
    inner: ChaCha20Rng,
    spare_normal: Option<f64>,
}

impl SeqRng {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            inner: ChaCha20Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn derived(master: u64, domain: u64, index: u64) -> Self {
        Self::from_seed(derive_seed(master, domain, index))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Unbiased integer in `[0, n)`. Panics if `n == 0`.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % n;
            }
        }
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.below(n as u64) as usize
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// `k` distinct indices from `0..pool`, in draw order.
    pub fn choose_distinct(&mut self, pool: usize, k: usize) -> Vec<usize> {
        assert!(k <= pool, "cannot choose {k} of {pool}");
        let mut items: Vec<usize> = (0..pool).collect();
        for i in 0..k {
            let j = i + self.index(pool - i);
            items.swap(i, j);
        }
        items.truncate(k);
        items
    }

    /// Fisher–Yates shuffle of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut items: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
        items
    }
}
