use alloc::vec;
use alloc::vec::Vec;

use super::{missing_cache, Mode};
use crate::error::{Error, Result};
use crate::scalar::{cst, Scalar};
use crate::tensor::{Shape, Tensor};

/// 3×3 max pooling, stride 2, padding 1.
#[derive(Debug, Clone, Default)]
pub struct MaxPool3x3 {
    cache: Option<(Shape, Vec<usize>)>,
}

impl MaxPool3x3 {
    pub fn output_hw(h: usize, w: usize) -> (usize, usize) {
        ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1)
    }

    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.h < 2 || s.w < 2 {
            return Err(Error::invalid("max pool needs at least 2x2 input"));
        }
        let (oh, ow) = Self::output_hw(s.h, s.w);
        let out_shape = Shape::new(s.n, s.c, oh, ow);
        let mut y = Tensor::zeros(out_shape);
        let mut arg = vec![0usize; out_shape.numel()];
        for n in 0..s.n {
            for c in 0..s.c {
                let plane = x.plane(n, c);
                let base = (n * s.c + c) * s.plane();
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_i = 0;
                        for ky in 0..3 {
                            let iy = (oy * 2 + ky) as isize - 1;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (ox * 2 + kx) as isize - 1;
                                if ix < 0 || ix >= s.w as isize {
                                    continue;
                                }
                                let i = iy as usize * s.w + ix as usize;
                                if plane[i] > best {
                                    best = plane[i];
                                    best_i = i;
                                }
                            }
                        }
                        let o = y.index(n, c, oy, ox);
                        y.data_mut()[o] = best;
                        arg[o] = base + best_i;
                    }
                }
            }
        }
        self.cache = mode.is_train().then_some((s, arg));
        Ok(y)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, arg) = self.cache.as_ref().ok_or_else(|| missing_cache("max pool"))?;
        if dy.data().len() != arg.len() {
            return Err(Error::invalid("max pool backward: gradient size mismatch"));
        }
        let mut dx = Tensor::zeros(*shape);
        for (&i, &g) in arg.iter().zip(dy.data()) {
            dx.data_mut()[i] += g;
        }
        Ok(dx)
    }
}

/// 2×2 average pooling with stride 2 on even-sized inputs.
#[derive(Debug, Clone, Default)]
pub struct AvgPool2 {
    input: Option<Shape>,
}

impl AvgPool2 {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::invalid("average pool needs even spatial dimensions"));
        }
        let quarter = cst::<T>(0.25);
        let y = Tensor::from_fn(Shape::new(s.n, s.c, s.h / 2, s.w / 2), |n, c, y, xx| {
            (x.at(n, c, 2 * y, 2 * xx) + x.at(n, c, 2 * y, 2 * xx + 1) + x.at(n, c, 2 * y + 1, 2 * xx) + x.at(n, c, 2 * y + 1, 2 * xx + 1))
                * quarter
        });
        self.input = mode.is_train().then_some(s);
        Ok(y)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.input.ok_or_else(|| missing_cache("average pool"))?;
        dy.ensure_shape(Shape::new(s.n, s.c, s.h / 2, s.w / 2), "average pool backward")?;
        let quarter = cst::<T>(0.25);
        Ok(Tensor::from_fn(s, |n, c, y, x| dy.at(n, c, y / 2, x / 2) * quarter))
    }
}

/// Mean over each spatial plane, giving `N × C × 1 × 1`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let inv = T::one() / cst::<T>(s.plane() as f64);
    Tensor::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| x.plane(n, c).iter().copied().sum::<T>() * inv)
}

pub fn global_avg_pool_backward<T: Scalar>(dy: &Tensor<T>, input: Shape) -> Tensor<T> {
    let inv = T::one() / cst::<T>(input.plane() as f64);
    Tensor::from_fn(input, |n, c, _, _| dy.at(n, c, 0, 0) * inv)
}
