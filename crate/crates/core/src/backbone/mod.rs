//! Five-stage BotNet-style encoders.
//!
//! Stage 1 is a 7×7 stride-2 convolution with norm and ReLU. Stage 2 is a
//! 3×3 stride-2 max pool followed by a bottleneck group; stages 3 and 4
//! are stride-2 bottleneck groups; stage 5 is a stride-2 bottleneck group
//! whose 3×3 convolutions are replaced by multi-head self-attention (with
//! a 2×2 average pool where the block downsamples).

mod mhsa;

use alloc::format;
use alloc::vec::Vec;

pub use mhsa::Mhsa;

use crate::error::{Error, Result};
use crate::nn::{join, relu_backward, relu_inplace, AvgPool2, BatchNorm, Conv2d, InitRng, MaxPool3x3, Mode, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Shape, Tensor};
use crate::types::{StageIndex, NUM_STAGES};

/// Channel widths of the BotNet-50 stage outputs.
pub const BOTNET50_CHANNELS: [usize; NUM_STAGES] = [64, 256, 512, 1024, 2048];

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// 3 for RGB, 1 for depth.
    pub in_channels: usize,
    /// Full-width stage output channels before scaling.
    pub stage_channels: [usize; NUM_STAGES],
    pub width_multiplier: f64,
    /// Bottleneck blocks in stages 2 through 5.
    pub block_depths: [usize; 4],
    pub use_mhsa_stage5: bool,
    pub mhsa_heads: usize,
}

impl EncoderConfig {
    /// Full BotNet-50 profile.
    pub fn full_width(in_channels: usize) -> Self {
        EncoderConfig {
            in_channels,
            stage_channels: BOTNET50_CHANNELS,
            width_multiplier: 1.0,
            block_depths: [3, 4, 6, 3],
            use_mhsa_stage5: true,
            mhsa_heads: 4,
        }
    }

    /// One-eighth width, one block per group.
    pub fn desk_scale(in_channels: usize) -> Self {
        EncoderConfig {
            width_multiplier: 0.125,
            block_depths: [1, 1, 1, 1],
            ..Self::full_width(in_channels)
        }
    }

    /// Scaled output channels of each stage.
    pub fn channels(&self) -> Result<[usize; NUM_STAGES]> {
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::invalid(format!("width multiplier {} must be positive", self.width_multiplier)));
        }
        let mut out = [0; NUM_STAGES];
        for (o, &c) in out.iter_mut().zip(&self.stage_channels) {
            *o = libm::round(c as f64 * self.width_multiplier) as usize;
            if *o < 8 {
                return Err(Error::invalid(format!(
                    "stage width {c} x {} rounds below 8 channels",
                    self.width_multiplier
                )));
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::invalid("encoder needs at least one input channel"));
        }
        if self.block_depths.iter().any(|&d| d == 0) {
            return Err(Error::invalid("every bottleneck group needs at least one block"));
        }
        let channels = self.channels()?;
        if self.use_mhsa_stage5 {
            let mid = channels[4] / 4;
            if self.mhsa_heads == 0 || mid % self.mhsa_heads != 0 {
                return Err(Error::invalid(format!(
                    "stage 5 bottleneck width {mid} is not divisible into {} heads",
                    self.mhsa_heads
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Spatial<T> {
    Conv(Conv2d<T>),
    Attention { mhsa: Mhsa<T>, pool: Option<AvgPool2> },
}

impl<T: Scalar> Spatial<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Spatial::Conv(conv) => conv.forward(x, mode),
            Spatial::Attention { mhsa, pool } => {
                let y = mhsa.forward(x, mode)?;
                match pool {
                    Some(p) => p.forward(&y, mode),
                    None => Ok(y),
                }
            }
        }
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Spatial::Conv(conv) => conv.backward(dy),
            Spatial::Attention { mhsa, pool } => {
                let g = match pool {
                    Some(p) => p.backward(dy)?,
                    None => dy.clone(),
                };
                mhsa.backward(&g)
            }
        }
    }
}

impl<T: Scalar> Module<T> for Spatial<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match self {
            Spatial::Conv(c) => c.visit(&join(prefix, "conv"), f),
            Spatial::Attention { mhsa, .. } => mhsa.visit(&join(prefix, "mhsa"), f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            Spatial::Conv(c) => c.visit_mut(&join(prefix, "conv"), f),
            Spatial::Attention { mhsa, .. } => mhsa.visit_mut(&join(prefix, "mhsa"), f),
        }
    }
}

#[derive(Debug, Clone)]
struct Projection<T> {
    conv: Conv2d<T>,
    bn: BatchNorm<T>,
}

crate::module_fields!(Projection { conv, bn });

#[derive(Debug, Clone, Default)]
struct BlockCache<T> {
    a: Option<Tensor<T>>,
    b: Option<Tensor<T>>,
    out: Option<Tensor<T>>,
}

/// 1×1 reduce → 3×3 (or attention) → 1×1 expand, with a residual shortcut.
#[derive(Debug, Clone)]
pub struct Bottleneck<T> {
    conv1: Conv2d<T>,
    bn1: BatchNorm<T>,
    spatial: Spatial<T>,
    bn2: BatchNorm<T>,
    conv3: Conv2d<T>,
    bn3: BatchNorm<T>,
    shortcut: Option<Projection<T>>,
    cache: BlockCache<T>,
}

crate::module_fields!(Bottleneck { conv1, bn1, spatial, bn2, conv3, bn3, shortcut });

impl<T: Scalar> Bottleneck<T> {
    /// `attention` carries `(heads, height, width)` of the block input when
    /// the 3×3 convolution is replaced by self-attention.
    fn new(
        in_ch: usize,
        mid: usize,
        out_ch: usize,
        stride: usize,
        attention: Option<(usize, usize, usize)>,
        rng: &mut InitRng,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(in_ch, mid, 1, 1, 0, false, rng);
        let spatial = match attention {
            None => Spatial::Conv(Conv2d::new(mid, mid, 3, stride, 1, false, rng)),
            Some((heads, h, w)) => Spatial::Attention {
                mhsa: Mhsa::new(mid, heads, h, w, rng)?,
                pool: (stride == 2).then(AvgPool2::default),
            },
        };
        let conv3 = Conv2d::new(mid, out_ch, 1, 1, 0, false, rng);
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| Projection {
            conv: Conv2d::new(in_ch, out_ch, 1, stride, 0, false, rng),
            bn: BatchNorm::new(out_ch),
        });
        Ok(Bottleneck {
            conv1,
            bn1: BatchNorm::new(mid),
            spatial,
            bn2: BatchNorm::new(mid),
            conv3,
            bn3: BatchNorm::new(out_ch),
            shortcut,
            cache: BlockCache::default(),
        })
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut a = self.bn1.forward(&self.conv1.forward(x, mode)?, mode)?;
        relu_inplace(&mut a);
        let mut b = self.bn2.forward(&self.spatial.forward(&a, mode)?, mode)?;
        relu_inplace(&mut b);
        let mut out = self.bn3.forward(&self.conv3.forward(&b, mode)?, mode)?;
        match &mut self.shortcut {
            Some(p) => out.add_assign(&p.bn.forward(&p.conv.forward(x, mode)?, mode)?)?,
            None => out.add_assign(x)?,
        }
        relu_inplace(&mut out);
        if mode.is_train() {
            self.cache = BlockCache {
                a: Some(a),
                b: Some(b),
                out: Some(out.clone()),
            };
        }
        Ok(out)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = core::mem::take(&mut self.cache);
        let (a, b, out) = match (cache.a, cache.b, cache.out) {
            (Some(a), Some(b), Some(out)) => (a, b, out),
            _ => return Err(crate::nn::missing_cache("bottleneck")),
        };
        let mut g = dy.clone();
        relu_backward(&mut g, &out);
        let dx_short = match &mut self.shortcut {
            Some(p) => p.conv.backward(&p.bn.backward(&g)?)?,
            None => g.clone(),
        };
        let mut db = self.conv3.backward(&self.bn3.backward(&g)?)?;
        relu_backward(&mut db, &b);
        let mut da = self.spatial.backward(&self.bn2.backward(&db)?)?;
        relu_backward(&mut da, &a);
        let mut dx = self.conv1.backward(&self.bn1.backward(&da)?)?;
        dx.add_assign(&dx_short)?;
        Ok(dx)
    }
}

/// 7×7 stride-2 convolution, norm, ReLU.
#[derive(Debug, Clone)]
pub struct Stem<T> {
    conv: Conv2d<T>,
    bn: BatchNorm<T>,
    out: Option<Tensor<T>>,
}

crate::module_fields!(Stem { conv, bn });

#[derive(Debug, Clone)]
pub enum EncoderStage<T> {
    Stem(Stem<T>),
    Group {
        pool: Option<MaxPool3x3>,
        blocks: Vec<Bottleneck<T>>,
    },
}

impl<T: Scalar> EncoderStage<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            EncoderStage::Stem(stem) => {
                let mut y = stem.bn.forward(&stem.conv.forward(x, mode)?, mode)?;
                relu_inplace(&mut y);
                stem.out = mode.is_train().then(|| y.clone());
                Ok(y)
            }
            EncoderStage::Group { pool, blocks } => {
                let mut h = match pool {
                    Some(p) => p.forward(x, mode)?,
                    None => x.clone(),
                };
                for block in blocks.iter_mut() {
                    h = block.forward(&h, mode)?;
                }
                Ok(h)
            }
        }
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            EncoderStage::Stem(stem) => {
                let out = stem.out.take().ok_or_else(|| crate::nn::missing_cache("stem"))?;
                let mut g = dy.clone();
                relu_backward(&mut g, &out);
                stem.conv.backward(&stem.bn.backward(&g)?)
            }
            EncoderStage::Group { pool, blocks } => {
                let mut g = dy.clone();
                for block in blocks.iter_mut().rev() {
                    g = block.backward(&g)?;
                }
                match pool {
                    Some(p) => p.backward(&g),
                    None => Ok(g),
                }
            }
        }
    }
}

impl<T: Scalar> Module<T> for EncoderStage<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match self {
            EncoderStage::Stem(s) => s.visit(prefix, f),
            EncoderStage::Group { blocks, .. } => {
                for (i, b) in blocks.iter().enumerate() {
                    b.visit(&join(prefix, &format!("block{i}")), f);
                }
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            EncoderStage::Stem(s) => s.visit_mut(prefix, f),
            EncoderStage::Group { blocks, .. } => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    b.visit_mut(&join(prefix, &format!("block{i}")), f);
                }
            }
        }
    }
}

/// Raw outputs of the five stages (strides 2, 4, 8, 16, 32).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutputs<T> {
    pub stages: Vec<FeatureMap<T>>,
}

#[derive(Debug, Clone)]
pub struct Encoder<T> {
    config: EncoderConfig,
    channels: [usize; NUM_STAGES],
    input_hw: (usize, usize),
    stages: Vec<EncoderStage<T>>,
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&join(prefix, &format!("stage{}", i + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stage{}", i + 1)), f);
        }
    }
}

fn check_resolution(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::invalid(format!(
            "input resolution {h}x{w} must be positive and divisible by 32"
        )));
    }
    Ok(())
}

impl<T: Scalar> Encoder<T> {
    /// Self-attention position tables are sized for `input_hw`.
    pub fn new(config: &EncoderConfig, input_hw: (usize, usize), rng: &mut InitRng) -> Result<Self> {
        config.validate()?;
        check_resolution(input_hw.0, input_hw.1)?;
        let channels = config.channels()?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        stages.push(EncoderStage::Stem(Stem {
            conv: Conv2d::new(config.in_channels, channels[0], 7, 2, 3, false, rng),
            bn: BatchNorm::new(channels[0]),
            out: None,
        }));
        for g in 0..4 {
            let stage = g + 2;
            let in_ch = channels[g];
            let out_ch = channels[g + 1];
            let mid = out_ch / 4;
            let stride = if stage == 2 { 1 } else { 2 };
            // spatial size entering the group (after the stage-2 max pool)
            let (gh, gw) = (input_hw.0 >> (stage - 1).max(2), input_hw.1 >> (stage - 1).max(2));
            let mut blocks = Vec::with_capacity(config.block_depths[g]);
            for b in 0..config.block_depths[g] {
                let (s, bin) = if b == 0 { (stride, in_ch) } else { (1, out_ch) };
                let attention = (stage == 5 && config.use_mhsa_stage5).then(|| {
                    let (h, w) = if b == 0 { (gh, gw) } else { (gh / stride, gw / stride) };
                    (config.mhsa_heads, h, w)
                });
                blocks.push(Bottleneck::new(bin, mid, out_ch, s, attention, rng)?);
            }
            stages.push(EncoderStage::Group {
                pool: (stage == 2).then(MaxPool3x3::default),
                blocks,
            });
        }
        Ok(Encoder {
            config: config.clone(),
            channels,
            input_hw,
            stages,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn channels(&self) -> [usize; NUM_STAGES] {
        self.channels
    }

    pub fn input_hw(&self) -> (usize, usize) {
        self.input_hw
    }

    pub fn input_shape(&self, batch: usize) -> Shape {
        Shape::new(batch, self.config.in_channels, self.input_hw.0, self.input_hw.1)
    }

    pub fn stage_output_shape(&self, stage: StageIndex, batch: usize) -> Shape {
        let shift = stage.get();
        Shape::new(batch, self.channels[stage.zero_based()], self.input_hw.0 >> shift, self.input_hw.1 >> shift)
    }

    /// Expected input of `stage`: the network input for stage 1, otherwise
    /// the previous stage's output shape.
    pub fn stage_input_shape(&self, stage: StageIndex, batch: usize) -> Shape {
        match stage.get() {
            1 => self.input_shape(batch),
            n => self.stage_output_shape(StageIndex::new(n - 1).expect("2..=5"), batch),
        }
    }

    pub fn forward_stage(&mut self, stage: StageIndex, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let expected = self.stage_input_shape(stage, x.shape().n);
        x.ensure_shape(expected, "encoder stage input")?;
        self.stages[stage.zero_based()].forward(x, mode)
    }

    pub fn backward_stage(&mut self, stage: StageIndex, dy: &Tensor<T>) -> Result<Tensor<T>> {
        self.stages[stage.zero_based()].backward(dy)
    }

    /// Run all five stages. `inject` may return a replacement for a stage's
    /// output; the next stage then consumes the replacement, while the raw
    /// output is still reported.
    pub fn forward_with(
        &mut self,
        input: &Tensor<T>,
        mode: Mode,
        mut inject: impl FnMut(StageIndex, &FeatureMap<T>) -> Result<Option<FeatureMap<T>>>,
    ) -> Result<EncoderOutputs<T>> {
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut next = input.clone();
        for stage in StageIndex::all() {
            let out = self.forward_stage(stage, &next, mode)?;
            next = match inject(stage, &out)? {
                Some(replacement) => {
                    if replacement.shape() != out.shape() {
                        return Err(Error::StageShape {
                            stage: stage.get(),
                            expected: out.shape(),
                            found: replacement.shape(),
                        });
                    }
                    replacement
                }
                None => out.clone(),
            };
            stages.push(out);
        }
        Ok(EncoderOutputs { stages })
    }

    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<EncoderOutputs<T>> {
        self.forward_with(input, mode, |_, _| Ok(None))
    }
}
