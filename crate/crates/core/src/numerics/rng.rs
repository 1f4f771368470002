//! Splittable, replayable random streams.
//!
//! A stream is a ChaCha8 keystream keyed by `seed` and selected by `stream_id`;
//! the cipher's block counter is the draw counter. Two streams with the same
//! `(seed, stream_id)` produce the same sequence on every platform.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Fresh stream with the same seed and a different id.
    pub fn fork(&self, stream_id: u64) -> Self {
        Self::new(self.seed, stream_id)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Access to the underlying generator for `rand` adaptors (shuffles, index sampling).
    pub fn as_rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Stream id composed from a purpose tag and a counter (step, epoch, cell index).
pub fn stream_id(purpose: u16, counter: u64) -> u64 {
    ((purpose as u64) << 48) | (counter & 0xffff_ffff_ffff)
}
