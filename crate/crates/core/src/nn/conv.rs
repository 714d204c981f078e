use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::init::{normal, uniform, InitRng};
use super::{missing_cache, Mode, Param};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Sliding-window geometry of a square-kernel convolution over a
/// `c × h × w` image producing an `oh × ow` grid of windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Geometry {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if k == 0 || stride == 0 {
            return Err(Error::invalid("kernel and stride must be positive"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::invalid(format!(
                "kernel {k} with padding {pad} does not fit a {h}x{w} input"
            )));
        }
        Ok(Geometry {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    #[inline]
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    #[inline]
    fn windows(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfold `n` images into a `(c·k·k) × (n·oh·ow)` column matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], n: usize, g: &Geometry) -> Vec<T> {
    let l = g.windows();
    let cols_per_row = n * l;
    let mut cols = vec![T::zero(); g.rows() * cols_per_row];
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                for s in 0..n {
                    let img = &x[(s * g.c + ci) * g.h * g.w..(s * g.c + ci + 1) * g.h * g.w];
                    let base = row * cols_per_row + s * l;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &img[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst = &mut cols[base + oy * g.ow..base + (oy + 1) * g.ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `n` images.
pub(crate) fn col2im<T: Scalar>(cols: &[T], n: usize, g: &Geometry) -> Vec<T> {
    let l = g.windows();
    let cols_per_row = n * l;
    let mut x = vec![T::zero(); n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                for s in 0..n {
                    let img_start = (s * g.c + ci) * g.h * g.w;
                    let base = row * cols_per_row + s * l;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row_start = img_start + iy as usize * g.w;
                        let src = &cols[base + oy * g.ow..base + (oy + 1) * g.ow];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                x[row_start + ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    cols: Vec<T>,
    input: Shape,
    geom: Geometry,
}

/// 2-D convolution with a square kernel; weight layout `[out, in, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<ConvCache<T>>,
}

crate::module_fields!(Conv2d { weight, bias });

impl<T: Scalar> Conv2d<T> {
    /// He-normal initialization with fan-out scaling, zero bias.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut InitRng,
    ) -> Self {
        let std = (2.0 / (out_channels * kernel * kernel) as f64).sqrt();
        let weight = normal(Shape::new(out_channels, in_channels, kernel, kernel), std, rng);
        Conv2d {
            weight: Param::new(weight),
            bias: bias.then(|| Param::new(Tensor::zeros(Shape::new(1, out_channels, 1, 1)))),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    /// Stride-1 convolution whose output keeps the input's spatial shape.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, bias: bool, rng: &mut InitRng) -> Self {
        Self::new(in_channels, out_channels, kernel, 1, kernel / 2, bias, rng)
    }

    /// Same-padded convolution with weights and bias uniform in
    /// `±1/√fan_in`.
    pub fn same_fan_in(in_channels: usize, out_channels: usize, kernel: usize, bias: bool, rng: &mut InitRng) -> Self {
        let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        let weight = uniform(Shape::new(out_channels, in_channels, kernel, kernel), bound, rng);
        Conv2d {
            weight: Param::new(weight),
            bias: bias.then(|| Param::new(uniform(Shape::new(1, out_channels, 1, 1), bound, rng))),
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
            cache: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn geometry(&self, input: Shape) -> Result<Geometry> {
        if input.c != self.in_channels {
            return Err(Error::ShapeMismatch {
                context: "conv2d input channels",
                expected: input.with_c(self.in_channels),
                found: input,
            });
        }
        Geometry::new(input.c, input.h, input.w, self.kernel, self.stride, self.padding)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let g = self.geometry(input)?;
        Ok(Shape::new(input.n, self.out_channels, g.oh, g.ow))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let input = x.shape();
        let g = self.geometry(input)?;
        let cols = if g.is_pointwise() {
            x.to_channel_major()
        } else {
            im2col(x.data(), input.n, &g)
        };
        let nl = input.n * g.windows();
        let kk = g.rows();
        let mut out = vec![T::zero(); self.out_channels * nl];
        T::gemm(
            self.out_channels,
            kk,
            nl,
            T::one(),
            self.weight.value.data(),
            (kk, 1),
            &cols,
            (nl, 1),
            T::zero(),
            &mut out,
            (nl, 1),
        );
        let shape = Shape::new(input.n, self.out_channels, g.oh, g.ow);
        let mut y = Tensor::from_channel_major(shape, &out);
        if let Some(b) = &self.bias {
            add_channel_bias(&mut y, b.value.data());
        }
        self.cache = mode.is_train().then_some(ConvCache { cols, input, geom: g });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_cache("conv2d"))?;
        let g = cache.geom;
        let n = cache.input.n;
        dy.ensure_shape(Shape::new(n, self.out_channels, g.oh, g.ow), "conv2d backward")?;
        let nl = n * g.windows();
        let kk = g.rows();
        let dy_cm = dy.to_channel_major();
        T::gemm(
            self.out_channels,
            nl,
            kk,
            T::one(),
            &dy_cm,
            (nl, 1),
            &cache.cols,
            (1, nl),
            T::one(),
            self.weight.grad.data_mut(),
            (kk, 1),
        );
        if let Some(b) = &mut self.bias {
            accumulate_channel_sums(b.grad.data_mut(), &dy_cm, nl);
        }
        let mut dcols = vec![T::zero(); kk * nl];
        T::gemm(
            kk,
            self.out_channels,
            nl,
            T::one(),
            self.weight.value.data(),
            (1, kk),
            &dy_cm,
            (nl, 1),
            T::zero(),
            &mut dcols,
            (nl, 1),
        );
        if g.is_pointwise() {
            Ok(Tensor::from_channel_major(cache.input, &dcols))
        } else {
            Tensor::from_vec(cache.input, col2im(&dcols, n, &g))
        }
    }
}

/// Transposed convolution; weight layout `[in, out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<(Vec<T>, Shape, Geometry)>,
}

crate::module_fields!(ConvTranspose2d { weight, bias });

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut InitRng,
    ) -> Self {
        let std = (2.0 / (in_channels * kernel * kernel) as f64).sqrt();
        let weight = normal(Shape::new(in_channels, out_channels, kernel, kernel), std, rng);
        ConvTranspose2d {
            weight: Param::new(weight),
            bias: bias.then(|| Param::new(Tensor::zeros(Shape::new(1, out_channels, 1, 1)))),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            cache: None,
        }
    }

    /// Geometry of the equivalent forward convolution over the output.
    fn geometry(&self, input: Shape) -> Result<Geometry> {
        if input.c != self.in_channels {
            return Err(Error::ShapeMismatch {
                context: "transposed conv input channels",
                expected: input.with_c(self.in_channels),
                found: input,
            });
        }
        let span = |d: usize| (d - 1) * self.stride + self.kernel;
        if input.h == 0 || input.w == 0 || span(input.h) < 2 * self.padding + 1 || span(input.w) < 2 * self.padding + 1 {
            return Err(Error::invalid("transposed convolution output would be empty"));
        }
        let oh = span(input.h) - 2 * self.padding;
        let ow = span(input.w) - 2 * self.padding;
        let g = Geometry::new(self.out_channels, oh, ow, self.kernel, self.stride, self.padding)?;
        debug_assert_eq!((g.oh, g.ow), (input.h, input.w));
        Ok(g)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let g = self.geometry(input)?;
        Ok(Shape::new(input.n, self.out_channels, g.h, g.w))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let input = x.shape();
        let g = self.geometry(input)?;
        let kk = g.rows();
        let nl = input.n * g.windows();
        let x_cm = x.to_channel_major();
        let mut cols = vec![T::zero(); kk * nl];
        T::gemm(
            kk,
            self.in_channels,
            nl,
            T::one(),
            self.weight.value.data(),
            (1, kk),
            &x_cm,
            (nl, 1),
            T::zero(),
            &mut cols,
            (nl, 1),
        );
        let mut y = Tensor::from_vec(Shape::new(input.n, self.out_channels, g.h, g.w), col2im(&cols, input.n, &g))?;
        if let Some(b) = &self.bias {
            add_channel_bias(&mut y, b.value.data());
        }
        self.cache = mode.is_train().then_some((x_cm, input, g));
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (x_cm, input, g) = self.cache.as_ref().ok_or_else(|| missing_cache("transposed conv"))?;
        let n = input.n;
        dy.ensure_shape(Shape::new(n, self.out_channels, g.h, g.w), "transposed conv backward")?;
        let kk = g.rows();
        let nl = n * g.windows();
        let dcols = im2col(dy.data(), n, g);
        T::gemm(
            self.in_channels,
            nl,
            kk,
            T::one(),
            x_cm,
            (nl, 1),
            &dcols,
            (1, nl),
            T::one(),
            self.weight.grad.data_mut(),
            (kk, 1),
        );
        if let Some(b) = &mut self.bias {
            for s in 0..n {
                for c in 0..self.out_channels {
                    b.grad.data_mut()[c] += dy.plane(s, c).iter().copied().sum::<T>();
                }
            }
        }
        let mut dx_cm = vec![T::zero(); self.in_channels * nl];
        T::gemm(
            self.in_channels,
            kk,
            nl,
            T::one(),
            self.weight.value.data(),
            (kk, 1),
            &dcols,
            (nl, 1),
            T::zero(),
            &mut dx_cm,
            (nl, 1),
        );
        Ok(Tensor::from_channel_major(*input, &dx_cm))
    }
}

fn add_channel_bias<T: Scalar>(y: &mut Tensor<T>, bias: &[T]) {
    let shape = y.shape();
    for s in 0..shape.n {
        for (c, &b) in bias.iter().enumerate() {
            for v in y.plane_mut(s, c) {
                *v += b;
            }
        }
    }
}

fn accumulate_channel_sums<T: Scalar>(grad: &mut [T], dy_cm: &[T], row: usize) {
    for (c, g) in grad.iter_mut().enumerate() {
        *g += dy_cm[c * row..(c + 1) * row].iter().copied().sum::<T>();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::rng_from_seed;
    use crate::testutil::{assert_grads_match, random_tensor};

    /// Direct six-loop convolution.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let s = x.shape();
        let ws = w.shape();
        let oh = (s.h + 2 * pad - ws.h) / stride + 1;
        let ow = (s.w + 2 * pad - ws.w) / stride + 1;
        Tensor::from_fn(Shape::new(s.n, ws.n, oh, ow), |n, co, oy, ox| {
            let mut acc = 0.0;
            for ci in 0..s.c {
                for ky in 0..ws.h {
                    for kx in 0..ws.w {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                            acc += x.at(n, ci, iy as usize, ix as usize) * w.at(co, ci, ky, kx);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn fan_in_init_bounds() {
        let conv = Conv2d::<f64>::same_fan_in(16, 1, 7, true, &mut rng_from_seed(4));
        let bound = 1.0 / (16.0f64 * 49.0).sqrt();
        let w = conv.weight.value.data();
        assert!(w.iter().all(|v| v.abs() <= bound));
        assert!(w.iter().any(|v| v.abs() > bound / 2.0));
        assert!(conv.bias.as_ref().unwrap().value.data()[0].abs() <= bound);
        assert_eq!(conv.geometry(Shape::new(1, 16, 9, 11)).unwrap().oh, 9);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = rng_from_seed(1);
        for &(k, stride, pad) in &[(3, 1, 1), (7, 2, 3), (1, 1, 0), (1, 2, 0), (3, 2, 1)] {
            let mut conv = Conv2d::<f64>::new(3, 4, k, stride, pad, false, &mut rng);
            let x = random_tensor(Shape::new(2, 3, 9, 8), 2);
            let y = conv.forward(&x, Mode::Eval).unwrap();
            let want = naive_conv(&x, &conv.weight.value, stride, pad);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_conv_doubles_and_matches_scatter() {
        let mut rng = rng_from_seed(3);
        let mut up = ConvTranspose2d::<f64>::new(3, 2, 2, 2, 0, false, &mut rng);
        let x = random_tensor(Shape::new(1, 3, 3, 4), 5);
        let y = up.forward(&x, Mode::Eval).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 6, 8));
        let w = &up.weight.value;
        for co in 0..2 {
            for oy in 0..6 {
                for ox in 0..8 {
                    let want: f64 = (0..3).map(|ci| x.at(0, ci, oy / 2, ox / 2) * w.at(ci, co, oy % 2, ox % 2)).sum();
                    assert!((y.at(0, co, oy, ox) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(9);
        let conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, true, &mut rng);
        let x = random_tensor(Shape::new(2, 2, 5, 6), 4);
        assert_grads_match(conv, &x, |m, x, mode| m.forward(x, mode), |m, dy| m.backward(dy), 1e-6);
    }

    #[test]
    fn transposed_conv_gradients_match_finite_differences() {
        let mut rng = rng_from_seed(10);
        let up = ConvTranspose2d::<f64>::new(3, 2, 3, 2, 1, true, &mut rng);
        let x = random_tensor(Shape::new(2, 3, 3, 2), 6);
        assert_grads_match(up, &x, |m, x, mode| m.forward(x, mode), |m, dy| m.backward(dy), 1e-6);
    }

    #[test]
    fn rejects_channel_mismatch() {
        let mut conv = Conv2d::<f32>::new(3, 4, 3, 1, 1, false, &mut rng_from_seed(0));
        let err = conv.forward(&Tensor::zeros(Shape::new(1, 2, 4, 4)), Mode::Eval);
        assert!(matches!(err, Err(Error::ShapeMismatch { .. })));
        assert!(conv.backward(&Tensor::zeros(Shape::new(1, 4, 4, 4))).is_err());
    }
}
