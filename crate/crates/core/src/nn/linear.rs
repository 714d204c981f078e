use alloc::vec;

use super::init::{uniform, InitRng};
use super::{missing_cache, Mode, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Fully connected layer on `N × in × 1 × 1` feature vectors.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    /// `[out, in]`
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    cache: Option<Tensor<T>>,
}

crate::module_fields!(Linear { weight, bias });

impl<T: Scalar> Linear<T> {
    pub fn new(inputs: usize, outputs: usize, bias: bool, rng: &mut InitRng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        Linear {
            weight: Param::new(uniform(Shape::new(outputs, inputs, 1, 1), bound, rng)),
            bias: bias.then(|| Param::new(uniform(Shape::new(1, outputs, 1, 1), bound, rng))),
            cache: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape().c
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape().n
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = x.shape();
        let (inp, out) = (self.inputs(), self.outputs());
        if s.c != inp || s.plane() != 1 {
            return Err(Error::ShapeMismatch {
                context: "linear input",
                expected: Shape::new(s.n, inp, 1, 1),
                found: s,
            });
        }
        let mut y = vec![T::zero(); s.n * out];
        T::gemm(s.n, inp, out, T::one(), x.data(), (inp, 1), self.weight.value.data(), (1, inp), T::zero(), &mut y, (out, 1));
        if let Some(b) = &self.bias {
            for row in y.chunks_mut(out) {
                for (v, &bv) in row.iter_mut().zip(b.value.data()) {
                    *v += bv;
                }
            }
        }
        self.cache = mode.is_train().then(|| x.clone());
        Tensor::from_vec(Shape::new(s.n, out, 1, 1), y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.as_ref().ok_or_else(|| missing_cache("linear"))?;
        let n = x.shape().n;
        let (inp, out) = (self.inputs(), self.outputs());
        dy.ensure_shape(Shape::new(n, out, 1, 1), "linear backward")?;
        T::gemm(out, n, inp, T::one(), dy.data(), (1, out), x.data(), (inp, 1), T::one(), self.weight.grad.data_mut(), (inp, 1));
        if let Some(b) = &mut self.bias {
            for row in dy.data().chunks(out) {
                for (g, &d) in b.grad.data_mut().iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        let mut dx = vec![T::zero(); n * inp];
        T::gemm(n, out, inp, T::one(), dy.data(), (out, 1), self.weight.value.data(), (inp, 1), T::zero(), &mut dx, (inp, 1));
        Tensor::from_vec(x.shape(), dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng_from_seed;
    use crate::testutil::{assert_grads_match, random_tensor};

    #[test]
    fn computes_affine_map() {
        let mut fc = Linear::<f64>::new(3, 2, true, &mut rng_from_seed(4));
        let x = random_tensor(Shape::new(2, 3, 1, 1), 1);
        let y = fc.forward(&x, Mode::Eval).unwrap();
        for s in 0..2 {
            for o in 0..2 {
                let want: f64 = (0..3).map(|i| fc.weight.value.at(o, i, 0, 0) * x.at(s, i, 0, 0)).sum::<f64>()
                    + fc.bias.as_ref().unwrap().value.data()[o];
                assert!((y.at(s, o, 0, 0) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let fc = Linear::<f64>::new(4, 3, true, &mut rng_from_seed(8));
        let x = random_tensor(Shape::new(3, 4, 1, 1), 2);
        assert_grads_match(fc, &x, |m, x, mode| m.forward(x, mode), |m, dy| m.backward(dy), 1e-7);
    }
}
