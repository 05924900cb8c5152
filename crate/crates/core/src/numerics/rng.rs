use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Counter-based, splittable random stream.
///
/// A stream is identified by `(seed, counter)`; the counter is the ChaCha
/// word position, so restoring both reproduces the stream exactly.
/// [`Rng::split`] derives a child stream from the seed alone, which makes
/// children independent of how much the parent or any sibling has drawn.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn at(seed: u64, counter: u64) -> Self {
        let mut rng = Self::new(seed);
        rng.inner.set_word_pos(counter as u128);
        rng
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }

    /// Child stream `id`; a pure function of `(seed, id)`.
    pub fn split(&self, id: u64) -> Rng {
        let mut keyed = ChaCha8Rng::seed_from_u64(self.seed);
        keyed.set_stream(id.wrapping_add(1));
        Rng::new(keyed.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        rand::RngExt::random::<f64>(&mut self.inner)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi);
        lo + (self.next_u64() % (hi - lo + 1) as u64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.int_inclusive(0, i);
            xs.swap(i, j);
        }
    }
}
