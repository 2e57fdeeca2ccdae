//! Seedable, splittable random streams.
//!
//! Every stochastic routine in the crate takes an explicit `&mut SimRng`.
//! Child streams are derived from the parent *seed* (not its current state),
//! so `split` is a pure function of `(seed, label)` and replications can be
//! scheduled in any order without changing their draws.
//!
//! Splitting rule: `child_seed = splitmix64(seed ^ splitmix64(label + 0x9E37_79B9_7F4A_7C15))`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct SimRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn child_seed(&self, label: u64) -> u64 {
        splitmix64(self.seed ^ splitmix64(label.wrapping_add(GOLDEN_GAMMA)))
    }

    /// Independent stream for `label`, regardless of how much of `self` has
    /// been consumed.
    pub fn split(&self, label: u64) -> SimRng {
        SimRng::new(self.child_seed(label))
    }

    /// Repeated `split` along a path of labels.
    pub fn split_path(&self, labels: &[u64]) -> SimRng {
        labels.iter().fold(self.clone(), |rng, &l| rng.split(l))
    }
}

impl RngCore for SimRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
