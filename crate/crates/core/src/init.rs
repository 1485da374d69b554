//! Seeded, reproducible parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InitScheme {
    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    UniformFanIn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngSpec {
    pub seed: u64,
    pub scheme: InitScheme,
}

impl RngSpec {
    pub fn new(seed: u64) -> Self {
        RngSpec {
            seed,
            scheme: InitScheme::UniformFanIn,
        }
    }

    /// Derives an independent stream for the `index`-th parameter.
    pub fn derive(&self, index: u64) -> RngSpec {
        RngSpec {
            seed: splitmix64(self.seed ^ splitmix64(index.wrapping_add(0x9e37_79b9_7f4a_7c15))),
            scheme: self.scheme,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fills `shape` using `rng`, taking `fan_in` from the trailing dimension.
///
/// # Panics
/// If any dimension is zero.
pub fn init(shape: &[usize], rng: RngSpec) -> Tensor {
    let fan_in = *shape.last().expect("init needs at least one dimension");
    init_with_fan_in(shape, fan_in, rng)
}

pub fn init_with_fan_in(shape: &[usize], fan_in: usize, rng: RngSpec) -> Tensor {
    assert!(
        shape.iter().all(|&d| d > 0) && fan_in > 0,
        "init requires positive dimensions, got {shape:?}"
    );
    let n: usize = shape.iter().product();
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut gen = ChaCha8Rng::seed_from_u64(rng.seed);
    let data = match rng.scheme {
        InitScheme::UniformFanIn => (0..n).map(|_| gen.gen_range(-bound..=bound)).collect(),
    };
    Tensor::from_vec(shape.to_vec(), data)
}
