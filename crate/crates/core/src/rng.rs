//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the run seed; `split`
//! derives an independent child stream from a label, so components draw
//! from their own streams and adding a draw in one place never shifts the
//! values seen elsewhere.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Clone, Debug)]
pub struct SeedRng {
    key: u64,
    inner: ChaCha8Rng,
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        Self { key: seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent child stream identified by `label`.
    pub fn split(&self, label: &str) -> Self {
        self.split_index(fnv1a(label.as_bytes()))
    }

    pub fn split_index(&self, index: u64) -> Self {
        let key = splitmix(self.key ^ splitmix(index));
        Self::new(key)
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform integer in `lo..hi`.
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..hi)
    }

    pub fn normal(&mut self, std: f64) -> f64 {
        Normal::new(0.0, std).expect("finite std").sample(&mut self.inner)
    }

    /// Normal draw rejected outside two standard deviations.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let x = self.normal(std);
            if x.abs() <= 2.0 * std {
                return x;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}
