use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Parameter initialization stream.
pub type InitRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> InitRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Values are drawn in `f64` and rounded, so an `f32` and an `f64` network
/// built from the same seed agree up to rounding.
pub(crate) fn normal<T: Scalar>(shape: Shape, std: f64, rng: &mut InitRng) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite standard deviation");
    let data: Vec<T> = (0..shape.numel())
        .map(|_| T::from_f64_lossy(dist.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

pub(crate) fn uniform<T: Scalar>(shape: Shape, bound: f64, rng: &mut InitRng) -> Tensor<T> {
    let data: Vec<T> = (0..shape.numel())
        .map(|_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
        .collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}
