//! Five-stage upsampling decoder.
//!
//! Each stage runs a dual residual block, a channel gate and a transposed
//! CBR that doubles the spatial size:
//!
//! ```text
//! a = cbr1(x)   b = a + cbr2(a)   drb(x) = cbr3(b) + cbr4(x)
//! stage(x) = tcbr(channel_attention(drb(x)))
//! ```

use alloc::vec::Vec;

use crate::amf::ChannelAttention;
use crate::error::{Error, Result};
use crate::nn::{missing_cache, relu_backward, relu_inplace, BatchNorm, Conv2d, ConvTranspose2d, InitRng, Mode};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::types::NUM_STAGES;

/// Convolution → batch norm → ReLU.
#[derive(Debug, Clone)]
pub struct Cbr<T> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
    out: Option<Tensor<T>>,
}

crate::module_fields!(Cbr { conv, bn });

impl<T: Scalar> Cbr<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, rng: &mut InitRng) -> Self {
        Cbr {
            conv: Conv2d::new(in_channels, out_channels, kernel, stride, padding, false, rng),
            bn: BatchNorm::new(out_channels),
            out: None,
        }
    }

    /// Stride 1 with same padding; `kernel` must be odd.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut InitRng) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::invalid(alloc::format!("same-padding CBR needs an odd kernel, got {kernel}")));
        }
        Ok(Self::new(in_channels, out_channels, kernel, 1, kernel / 2, rng))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut y = self.bn.forward(&self.conv.forward(x, mode)?, mode)?;
        relu_inplace(&mut y);
        self.out = mode.is_train().then(|| y.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.out.take().ok_or_else(|| missing_cache("CBR"))?;
        let mut d = dy.clone();
        relu_backward(&mut d, &y);
        self.conv.backward(&self.bn.backward(&d)?)
    }
}

/// Transposed convolution (kernel 2, stride 2) → batch norm → ReLU.
#[derive(Debug, Clone)]
pub struct TransposedCbr<T> {
    pub conv: ConvTranspose2d<T>,
    pub bn: BatchNorm<T>,
    out: Option<Tensor<T>>,
}

crate::module_fields!(TransposedCbr { conv, bn });

impl<T: Scalar> TransposedCbr<T> {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut InitRng) -> Self {
        TransposedCbr {
            conv: ConvTranspose2d::new(in_channels, out_channels, 2, 2, 0, false, rng),
            bn: BatchNorm::new(out_channels),
            out: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut y = self.bn.forward(&self.conv.forward(x, mode)?, mode)?;
        relu_inplace(&mut y);
        self.out = mode.is_train().then(|| y.clone());
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.out.take().ok_or_else(|| missing_cache("transposed CBR"))?;
        let mut d = dy.clone();
        relu_backward(&mut d, &y);
        self.conv.backward(&self.bn.backward(&d)?)
    }
}

#[derive(Debug, Clone)]
pub struct DualResidualBlock<T> {
    pub cbr1: Cbr<T>,
    pub cbr2: Cbr<T>,
    pub cbr3: Cbr<T>,
    pub cbr4: Cbr<T>,
    channels: usize,
}

crate::module_fields!(DualResidualBlock { cbr1, cbr2, cbr3, cbr4 });

impl<T: Scalar> DualResidualBlock<T> {
    /// Three 3×3 CBRs and a 1×1 CBR on the outer skip.
    pub fn new(channels: usize, rng: &mut InitRng) -> Self {
        DualResidualBlock {
            cbr1: Cbr::new(channels, channels, 3, 1, 1, rng),
            cbr2: Cbr::new(channels, channels, 3, 1, 1, rng),
            cbr3: Cbr::new(channels, channels, 3, 1, 1, rng),
            cbr4: Cbr::new(channels, channels, 1, 1, 0, rng),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.c != self.channels {
            return Err(Error::ShapeMismatch {
                context: "dual residual block input",
                expected: s.with_c(self.channels),
                found: s,
            });
        }
        let a = self.cbr1.forward(x, mode)?;
        let b = a.add(&self.cbr2.forward(&a, mode)?)?;
        self.cbr3.forward(&b, mode)?.add(&self.cbr4.forward(x, mode)?)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut db = self.cbr3.backward(dy)?;
        let da = self.cbr2.backward(&db)?;
        db.add_assign(&da)?;
        let mut dx = self.cbr1.backward(&db)?;
        dx.add_assign(&self.cbr4.backward(dy)?)?;
        Ok(dx)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderStage<T> {
    pub drb: DualResidualBlock<T>,
    pub attention: ChannelAttention<T>,
    pub up: TransposedCbr<T>,
}

crate::module_fields!(DecoderStage { drb, attention, up });

impl<T: Scalar> DecoderStage<T> {
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut InitRng) -> Result<Self> {
        Ok(DecoderStage {
            drb: DualResidualBlock::new(in_channels, rng),
            attention: ChannelAttention::with_default_reduction(in_channels, rng)?,
            up: TransposedCbr::new(in_channels, out_channels, rng),
        })
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        Shape::new(input.n, self.up.bn.channels(), input.h * 2, input.w * 2)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.drb.forward(x, mode)?;
        let y = self.attention.forward(&y, mode)?;
        self.up.forward(&y, mode)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.up.backward(dy)?;
        let d = self.attention.backward(&d)?;
        self.drb.backward(&d)
    }
}

/// Stage `j` maps encoder-stage-`5−j` channels to encoder-stage-`4−j`
/// channels; the last stage keeps the stage-1 width.
#[derive(Debug, Clone)]
pub struct Decoder<T> {
    pub stages: Vec<DecoderStage<T>>,
}

crate::module_fields!(Decoder { stages });

impl<T: Scalar> Decoder<T> {
    pub fn new(encoder_channels: [usize; NUM_STAGES], rng: &mut InitRng) -> Result<Self> {
        let stages = (0..NUM_STAGES)
            .map(|j| {
                let input = encoder_channels[NUM_STAGES - 1 - j];
                let output = encoder_channels[(NUM_STAGES - 1 - j).saturating_sub(1)];
                DecoderStage::new(input, output, rng)
            })
            .collect::<Result<_>>()?;
        Ok(Decoder { stages })
    }

    pub fn output_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.up.bn.channels())
    }

    /// Runs all stages; `skips[j]` (if any) is added to stage `j`'s output.
    pub fn forward(&mut self, x: &Tensor<T>, skips: &[&Tensor<T>], mode: Mode) -> Result<Tensor<T>> {
        let mut y = x.clone();
        for (j, stage) in self.stages.iter_mut().enumerate() {
            y = stage.forward(&y, mode)?;
            if let Some(skip) = skips.get(j) {
                y.add_assign(skip).map_err(|_| Error::ShapeMismatch {
                    context: "decoder skip connection",
                    expected: y.shape(),
                    found: skip.shape(),
                })?;
            }
        }
        Ok(y)
    }

    /// Returns the input gradient and the gradients flowing into each skip.
    pub fn backward(&mut self, dy: &Tensor<T>, num_skips: usize) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut skip_grads = Vec::with_capacity(num_skips);
        let mut d = dy.clone();
        for (j, stage) in self.stages.iter_mut().enumerate().rev() {
            if j < num_skips {
                skip_grads.push(d.clone());
            }
            d = stage.backward(&d)?;
        }
        skip_grads.reverse();
        Ok((d, skip_grads))
    }
}
