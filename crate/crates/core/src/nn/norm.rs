use alloc::vec;
use alloc::vec::Vec;

use super::{missing_cache, Mode, Param};
use crate::error::{Error, Result};
use crate::scalar::{cst, Scalar};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
    shape: Shape,
}

/// Per-channel batch normalization over `N × H × W`.
///
/// Feature vectors are `N × C × 1 × 1` tensors, so the same layer serves
/// fully connected stacks. When a channel has a single element per batch
/// (batch size one on a vector), training mode falls back to the running
/// statistics since the batch variance is undefined.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    momentum: T,
    eps: T,
    cache: Option<BnCache<T>>,
}

crate::module_fields!(BatchNorm { gamma, beta, running_mean, running_var });

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        BatchNorm {
            gamma: Param::new(Tensor::full(s, T::one())),
            beta: Param::new(Tensor::zeros(s)),
            running_mean: Param::buffer(Tensor::zeros(s)),
            running_var: Param::buffer(Tensor::full(s, T::one())),
            momentum: cst(0.1),
            eps: cst(1e-5),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().c
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let shape = x.shape();
        let channels = self.channels();
        if shape.c != channels {
            return Err(Error::ShapeMismatch {
                context: "batch norm channels",
                expected: shape.with_c(channels),
                found: shape,
            });
        }
        let count = shape.n * shape.plane();
        let batch_stats = mode.is_train() && count > 1;
        let mut mean = vec![T::zero(); channels];
        let mut var = vec![T::zero(); channels];
        if batch_stats {
            let inv_count = T::one() / cst::<T>(count as f64);
            for c in 0..channels {
                let mut sum = T::zero();
                for s in 0..shape.n {
                    sum += x.plane(s, c).iter().copied().sum::<T>();
                }
                mean[c] = sum * inv_count;
                let mut sq = T::zero();
                for s in 0..shape.n {
                    for &v in x.plane(s, c) {
                        let d = v - mean[c];
                        sq += d * d;
                    }
                }
                var[c] = sq * inv_count;
            }
            let m = self.momentum;
            let unbias = cst::<T>(count as f64 / (count - 1) as f64);
            let rm = self.running_mean.value.data_mut();
            for c in 0..channels {
                rm[c] = (T::one() - m) * rm[c] + m * mean[c];
            }
            let rv = self.running_var.value.data_mut();
            for c in 0..channels {
                rv[c] = (T::one() - m) * rv[c] + m * var[c] * unbias;
            }
        } else {
            mean.copy_from_slice(self.running_mean.value.data());
            var.copy_from_slice(self.running_var.value.data());
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.eps).sqrt()).collect();
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut y = Tensor::zeros(shape);
        let mut xhat = if mode.is_train() { vec![T::zero(); shape.numel()] } else { Vec::new() };
        let p = shape.plane();
        for s in 0..shape.n {
            for c in 0..channels {
                let base = (s * channels + c) * p;
                let src = x.plane(s, c);
                let dst = y.plane_mut(s, c);
                for i in 0..p {
                    let h = (src[i] - mean[c]) * inv_std[c];
                    dst[i] = gamma[c] * h + beta[c];
                    if !xhat.is_empty() {
                        xhat[base + i] = h;
                    }
                }
            }
        }
        self.cache = mode.is_train().then_some(BnCache {
            xhat,
            inv_std,
            batch_stats,
            shape,
        });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache("batch norm"))?;
        let shape = cache.shape;
        dy.ensure_shape(shape, "batch norm backward")?;
        let channels = shape.c;
        let p = shape.plane();
        let count = cst::<T>((shape.n * p) as f64);
        let gamma = self.gamma.value.data();
        let mut dx = Tensor::zeros(shape);
        for c in 0..channels {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for s in 0..shape.n {
                let base = (s * channels + c) * p;
                for (i, &g) in dy.plane(s, c).iter().enumerate() {
                    sum_dy += g;
                    sum_dy_xhat += g * cache.xhat[base + i];
                }
            }
            self.gamma.grad.data_mut()[c] += sum_dy_xhat;
            self.beta.grad.data_mut()[c] += sum_dy;
            let scale = gamma[c] * cache.inv_std[c];
            for s in 0..shape.n {
                let base = (s * channels + c) * p;
                let g = dy.plane(s, c);
                let out = dx.plane_mut(s, c);
                if cache.batch_stats {
                    for i in 0..p {
                        out[i] = scale / count * (count * g[i] - sum_dy - cache.xhat[base + i] * sum_dy_xhat);
                    }
                } else {
                    for i in 0..p {
                        out[i] = scale * g[i];
                    }
                }
            }
        }
        Ok(dx)
    }
}
