//! Deterministic random streams.
//!
//! Every stochastic step (initialization, batch sampling, timesteps, noise)
//! draws from ChaCha8 seeded with a 64-bit seed. Independent streams, e.g.
//! one per sampled image, use seeds derived from `(base seed, index)` with
//! SplitMix64, so runs are reproducible from the seeds in their manifests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const GENERATOR_NAME: &str = "chacha8";

pub type Generator = ChaCha8Rng;

pub fn generator(seed: u64) -> Generator {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finalizer of `base ^ golden * (index + 1)`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn normal_tensor<T: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.sample::<f64, _>(StandardNormal)))
}

/// Position of a generator inside its stream, for checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeneratorState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl GeneratorState {
    pub fn capture(rng: &Generator) -> Self {
        GeneratorState { seed: rng.get_seed(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> Generator {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }

    /// `hexseed:wordpos`
    pub fn encode(&self) -> String {
        let hex: String = self.seed.iter().map(|b| format!("{b:02x}")).collect();
        format!("{hex}:{}", self.word_pos)
    }

    pub fn decode(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed generator state {s:?}"));
        let (hex, pos) = s.split_once(':').ok_or_else(bad)?;
        if hex.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        Ok(GeneratorState { seed, word_pos: pos.parse().map_err(|_| bad())? })
    }
}
