use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DropoutMask, Tensor};

/// Stream ids used to partition randomness by purpose.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const TIME: u64 = 5;
    pub const SAMPLE: u64 = 6;
    pub const SYNTH: u64 = 7;
}

/// Counter-based generator identified by `(seed, stream, counter)`.
///
/// The counter is the ChaCha word position, so any state can be rebuilt
/// exactly with [`RngState::at`].
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self::at(seed, stream, 0)
    }

    pub fn at(seed: u64, stream: u64, counter: u128) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        inner.set_word_pos(counter);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn counter(&self) -> u128 {
        self.inner.get_word_pos()
    }

    /// Fresh generator on another stream with the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    pub fn gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// I.i.d. standard normal tensor.
    pub fn gaussian_sample(&mut self, shape: impl Into<Vec<usize>>) -> Tensor {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.gaussian()).collect();
        Tensor::from_parts(shape, data)
    }

    /// Inverted-dropout mask; `p` is the drop probability.
    pub fn dropout_mask(&mut self, shape: impl Into<Vec<usize>>, p: f64) -> DropoutMask {
        let shape = shape.into();
        if p <= 0.0 {
            return DropoutMask::ones(shape);
        }
        let n = shape.iter().product();
        let bits = (0..n)
            .map(|_| if self.uniform() < p { 0.0 } else { 1.0 })
            .collect();
        DropoutMask {
            bits: Tensor::from_parts(shape, bits),
            scale: 1.0 / (1.0 - p),
        }
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}
