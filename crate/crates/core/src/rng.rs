//! Seeded random stream shared by every stochastic step of a run.
//!
//! The generator is ChaCha8 from `rand_chacha`, seeded with
//! `seed_from_u64`. Its position in the keystream is the whole state, so a
//! checkpoint only has to record the seed and the word position.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Identifier of the generator algorithm, recorded in checkpoints.
pub const RNG_ALGORITHM: &str = "chacha8/rand_chacha-0.9/seed_from_u64";

const GUMBEL_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serializable snapshot of an [`Rng`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    /// Keystream word position, as a decimal string (it is a `u128`).
    pub word_pos: String,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives an independent child stream; used to give sub-tasks their
    /// own generator without disturbing the parent's sequence length.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.inner.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// A Gumbel(0, 1) draw: `-ln(-ln u)` with `u` clamped to
    /// `[1e-12, 1 - 1e-12]`.
    pub fn gumbel(&mut self) -> f64 {
        let u = self.uniform().clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
        -(-u.ln()).ln()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            algorithm: RNG_ALGORITHM.to_string(),
            seed: self.seed,
            word_pos: self.inner.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &RngState) -> crate::Result<Self> {
        if state.algorithm != RNG_ALGORITHM {
            return Err(crate::Error::Checkpoint(format!(
                "rng algorithm `{}` does not match this build (`{RNG_ALGORITHM}`)",
                state.algorithm
            )));
        }
        let pos: u128 = state
            .word_pos
            .parse()
            .map_err(|_| crate::Error::Checkpoint(format!("bad word_pos `{}`", state.word_pos)))?;
        let mut rng = Rng::new(state.seed);
        rng.inner.set_word_pos(pos);
        Ok(rng)
    }
}
