use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Real, Tensor};

/// Seeded parameter generator. Each parameter name selects an independent
/// ChaCha stream, so initial values do not depend on creation order.
#[derive(Clone, Debug)]
pub struct ParamRng {
    seed: u64,
}

impl ParamRng {
    pub fn new(seed: u64) -> Self {
        ParamRng { seed }
    }

    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let digest = Sha256::digest(name.as_bytes());
        let stream = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// He-uniform: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn he_uniform<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| T::of(rng.random_range(-bound..bound)))
}
