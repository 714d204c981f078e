//! Dense NCHW tensors.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Batch × channels × height × width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub const fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Spatial size `h * w`.
    pub const fn plane(&self) -> usize {
        self.h * self.w
    }

    pub const fn hw(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub const fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub const fn with_n(self, n: usize) -> Self {
        Shape { n, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Contiguous row-major tensor in channels-major (N, C, H, W) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

/// An activation block flowing between network stages.
pub type FeatureMap<T = f32> = Tensor<T>;

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::invalid(alloc::format!(
                "tensor of shape {shape} needs {} elements, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for c in 0..shape.c {
                for y in 0..shape.h {
                    for x in 0..shape.w {
                        data.push(f(n, c, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + y) * self.shape.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    /// Plane `(n, c)` as a slice of `h * w` elements.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.shape.c * self.shape.plane();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::ShapeMismatch {
                context: "reshape",
                expected: self.shape,
                found: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn ensure_shape(&self, expected: Shape, context: &'static str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                context,
                expected,
                found: self.shape,
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        other.ensure_shape(self.shape, "add")?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        other.ensure_shape(self.shape, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn fill(&mut self, v: T) {
        for x in &mut self.data {
            *x = v;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum()
    }

    /// Concatenate along the batch dimension.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or(Error::Empty("tensor list"))?;
        let per = first.shape.with_n(1);
        let mut data = Vec::with_capacity(per.numel() * parts.iter().map(|p| p.shape.n).sum::<usize>());
        let mut n = 0;
        for p in parts {
            p.ensure_shape(per.with_n(p.shape.n), "stack")?;
            data.extend_from_slice(&p.data);
            n += p.shape.n;
        }
        Ok(Tensor {
            shape: per.with_n(n),
            data,
        })
    }

    /// Sample `n` as a batch of one.
    pub fn slice_batch(&self, n: usize) -> Self {
        Tensor {
            shape: self.shape.with_n(1),
            data: self.sample(n).to_vec(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap_or(f64::NAN)))
                .collect(),
        }
    }

    /// Reorder `(N, C, L)` into `(C, N * L)`.
    pub(crate) fn to_channel_major(&self) -> Vec<T> {
        let Shape { n, c, .. } = self.shape;
        let l = self.shape.plane();
        let mut out = vec![T::zero(); self.data.len()];
        for s in 0..n {
            for ch in 0..c {
                let src = &self.data[(s * c + ch) * l..(s * c + ch + 1) * l];
                out[ch * n * l + s * l..ch * n * l + (s + 1) * l].copy_from_slice(src);
            }
        }
        out
    }

    /// Inverse of [`Tensor::to_channel_major`].
    pub(crate) fn from_channel_major(shape: Shape, cm: &[T]) -> Self {
        let Shape { n, c, .. } = shape;
        let l = shape.plane();
        let mut data = vec![T::zero(); shape.numel()];
        for s in 0..n {
            for ch in 0..c {
                data[(s * c + ch) * l..(s * c + ch + 1) * l]
                    .copy_from_slice(&cm[ch * n * l + s * l..ch * n * l + (s + 1) * l]);
            }
        }
        Tensor { shape, data }
    }
}
