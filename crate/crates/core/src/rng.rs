//! Counter-based noise streams.
//!
//! Every trajectory owns the ChaCha8 stream `trajectory_index` under the
//! key `master_seed`, and step `k` starts reading at word `k * WORDS_PER_STEP`.
//! A variate therefore depends only on `(seed, trajectory, step)`, never on
//! which thread ran the trajectory or what ran before it.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// 32-bit words reserved per step. A Gaussian variate normally consumes two
/// words, so this leaves room for far more draws than any stepper needs.
pub const WORDS_PER_STEP: u128 = 64;

/// How Wiener increments are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMode {
    #[default]
    Gaussian,
    /// `dw = +-sqrt(dt)` with equal probability; matches the first two
    /// moments of `N(0, dt)` exactly.
    TwoPoint,
}

#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    mode: NoiseMode,
}

impl NoiseStream {
    pub fn new(master_seed: u64, trajectory: u64, mode: NoiseMode) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(trajectory);
        Self { rng, mode }
    }

    /// Positions the stream at the start of step `step`.
    pub fn seek_step(&mut self, step: usize) {
        self.rng.set_word_pos(step as u128 * WORDS_PER_STEP);
    }

    pub fn mode(&self) -> NoiseMode {
        self.mode
    }

    /// Uniform variate in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Wiener increment over `dt`.
    pub fn wiener(&mut self, dt: f64) -> f64 {
        match self.mode {
            NoiseMode::Gaussian => {
                let z: f64 = self.rng.sample(StandardNormal);
                z * dt.sqrt()
            }
            NoiseMode::TwoPoint => {
                if self.rng.next_u32() & 1 == 0 {
                    dt.sqrt()
                } else {
                    -dt.sqrt()
                }
            }
        }
    }
}
