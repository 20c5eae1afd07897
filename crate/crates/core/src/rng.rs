//! Keyed random streams.
//!
//! A run owns one 64-bit seed. Every noise draw asks for a stream keyed by
//! `(purpose, step, slot)`, so adding or removing draws for one purpose never
//! shifts the values another purpose sees. Streams are ChaCha20 with the key
//! packed into the 64-bit stream id.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::LatentTensor;

/// What a draw is used for. The discriminant is part of the stream key and
/// must stay stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum Purpose {
    InitialNoise = 1,
    Renoise = 2,
    ChannelMix = 3,
    GuidanceArtifacts = 4,
    SceneTexture = 5,
    Test = 0xfff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyedRng {
    seed: u64,
}

impl KeyedRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self, purpose: Purpose, step: u32, slot: u16) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        let id = ((purpose as u64) << 48) | ((step as u64) << 16) | slot as u64;
        rng.set_stream(id);
        rng
    }

    /// A standard-normal tensor from the stream `(purpose, step, slot)`.
    pub fn normal(&self, shape: [usize; 4], purpose: Purpose, step: u32, slot: u16) -> LatentTensor {
        let mut rng = self.stream(purpose, step, slot);
        let n: usize = shape.iter().product();
        let values: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        LatentTensor::from_shape_vec(shape, values).expect("normal draws are finite")
    }
}
