//! Full two-encoder network and its ablation variants.
//!
//! Both encoders run side by side. After stage `n` the RGB and depth
//! outputs are fused (by an [`Amf`] block or by plain addition); the fused
//! map feeds RGB stage `n + 1` and is added to the decoder output of the
//! same resolution. The stage-5 fusion seeds the decoder, and a 1×1
//! convolution maps the last decoder output to class logits.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::amf::{Amf, AmfDiagnostics};
use crate::backbone::{Encoder, EncoderConfig};
use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::maskgen::{build_pyramid, generate_mask, stage_shapes};
use crate::nn::{join, rng_from_seed, softmax_rows, Conv2d, Mode, Module, Param};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, Shape, Tensor};
use crate::types::{normalize_depth, DepthImage, LabelMap, MaskPyramid, RgbImage, StageIndex, NUM_CLASSES, NUM_STAGES};

/// Which encoder stages fuse through an AMF block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AblationSpec {
    amf_at_stage: [bool; NUM_STAGES],
}

const fn row(bits: [u8; NUM_STAGES]) -> AblationSpec {
    let mut amf_at_stage = [false; NUM_STAGES];
    let mut i = 0;
    while i < NUM_STAGES {
        amf_at_stage[i] = bits[i] == 1;
        i += 1;
    }
    AblationSpec { amf_at_stage }
}

/// The ten ablation rows, stage 1 first in each bit pattern.
pub const ABLATION_ROWS: [(char, AblationSpec); 10] = [
    ('A', row([0, 0, 0, 0, 0])),
    ('B', row([0, 0, 0, 0, 1])),
    ('C', row([0, 0, 0, 1, 0])),
    ('D', row([0, 0, 1, 0, 0])),
    ('E', row([0, 1, 0, 0, 0])),
    ('F', row([1, 0, 0, 0, 0])),
    ('G', row([0, 0, 0, 1, 1])),
    ('H', row([0, 0, 1, 1, 1])),
    ('I', row([0, 1, 1, 1, 1])),
    ('J', row([1, 1, 1, 1, 1])),
];

impl AblationSpec {
    pub const fn new(amf_at_stage: [bool; NUM_STAGES]) -> Self {
        AblationSpec { amf_at_stage }
    }

    /// Plain addition everywhere (row A).
    pub const fn none() -> Self {
        Self::new([false; NUM_STAGES])
    }

    /// AMF after every stage (row J).
    pub const fn all() -> Self {
        Self::new([true; NUM_STAGES])
    }

    pub fn from_row(label: char) -> Result<Self> {
        let label = label.to_ascii_uppercase();
        ABLATION_ROWS
            .iter()
            .find(|(l, _)| *l == label)
            .map(|&(_, s)| s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation row '{label}' (expected A-J)")))
    }

    pub fn row_label(&self) -> Option<char> {
        ABLATION_ROWS.iter().find(|(_, s)| s == self).map(|&(l, _)| l)
    }

    pub fn has_amf(&self, stage: StageIndex) -> bool {
        self.amf_at_stage[stage.zero_based()]
    }

    pub fn stages(&self) -> [bool; NUM_STAGES] {
        self.amf_at_stage
    }

    pub fn amf_count(&self) -> usize {
        self.amf_at_stage.iter().filter(|&&b| b).count()
    }
}

/// Five characters, stage 1 first: `+` for AMF, `A` for addition.
impl fmt::Display for AblationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.amf_at_stage {
            f.write_str(if b { "+" } else { "A" })?;
        }
        Ok(())
    }
}

/// Accepts a row letter (`"J"`) or the five-character form (`"++AAA"`).
impl FromStr for AblationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let mut chars = s.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            return Self::from_row(c);
        }
        if s.chars().count() != NUM_STAGES {
            return Err(Error::invalid(format!("ablation spec '{s}' must be a row letter or 5 characters of '+'/'A'")));
        }
        let mut amf = [false; NUM_STAGES];
        for (slot, c) in amf.iter_mut().zip(s.chars()) {
            *slot = match c {
                '+' => true,
                'A' | 'a' | '-' => false,
                other => return Err(Error::invalid(format!("ablation spec '{s}': unexpected '{other}'"))),
            };
        }
        Ok(Self::new(amf))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub input_hw: (usize, usize),
    /// Shared by both encoders; the input channel count is set per branch.
    pub encoder: EncoderConfig,
    pub amf_reduction: usize,
    pub spatial_kernel: usize,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn desk_scale(input_hw: (usize, usize), seed: u64) -> Self {
        NetworkConfig {
            input_hw,
            encoder: EncoderConfig::desk_scale(3),
            amf_reduction: 16,
            spatial_kernel: 7,
            seed,
        }
    }

    pub fn full_width(input_hw: (usize, usize), seed: u64) -> Self {
        NetworkConfig {
            encoder: EncoderConfig::full_width(3),
            ..Self::desk_scale(input_hw, seed)
        }
    }

    pub fn with_width(mut self, width_multiplier: f64) -> Self {
        self.encoder.width_multiplier = width_multiplier;
        self
    }

    /// Canonical text form of every field that shapes the parameters.
    pub fn fingerprint(&self, spec: AblationSpec) -> String {
        let e = &self.encoder;
        format!(
            "spec={spec};hw={}x{};width={};channels={:?};depths={:?};mhsa={}x{};reduction={};kernel={}",
            self.input_hw.0,
            self.input_hw.1,
            e.width_multiplier,
            e.stage_channels,
            e.block_depths,
            e.use_mhsa_stage5,
            e.mhsa_heads,
            self.amf_reduction,
            self.spatial_kernel
        )
    }
}

/// Batched network input: normalized RGB `N×3×H×W`, normalized depth
/// `N×1×H×W`, and the validity mask at each stage resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkInput<T> {
    pub rgb: Tensor<T>,
    pub depth: Tensor<T>,
    pub masks: Vec<Tensor<T>>,
}

impl<T: Scalar> NetworkInput<T> {
    pub fn batch(&self) -> usize {
        self.rgb.shape().n
    }

    /// Stacks samples; masks come from the raw depth before normalization.
    pub fn from_images(samples: &[(&RgbImage, &DepthImage)], depth_divisor: f32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("network input batch"));
        }
        let mut rgb = Vec::with_capacity(samples.len());
        let mut depth = Vec::with_capacity(samples.len());
        let mut pyramids = Vec::with_capacity(samples.len());
        for (r, d) in samples {
            if (r.height(), r.width()) != (d.height(), d.width()) {
                return Err(Error::ShapeMismatch {
                    context: "rgb/depth alignment",
                    expected: Shape::new(1, 1, r.height(), r.width()),
                    found: Shape::new(1, 1, d.height(), d.width()),
                });
            }
            rgb.push(r.to_feature_map().cast());
            depth.push(normalize_depth(d, depth_divisor)?.cast());
            let shapes = stage_shapes(d.height(), d.width())?;
            pyramids.push(build_pyramid(&generate_mask(d)?, &shapes)?);
        }
        let refs: Vec<&MaskPyramid> = pyramids.iter().collect();
        Ok(NetworkInput {
            rgb: Tensor::stack(&rgb)?,
            depth: Tensor::stack(&depth)?,
            masks: stack_pyramids(&refs)?,
        })
    }
}

/// One `N×1×h×w` tensor per stage.
pub fn stack_pyramids<T: Scalar>(pyramids: &[&MaskPyramid]) -> Result<Vec<Tensor<T>>> {
    StageIndex::all()
        .map(|s| {
            let levels: Vec<Tensor<T>> = pyramids.iter().map(|p| p.level(s).to_feature_map().cast()).collect();
            Tensor::stack(&levels)
        })
        .collect()
}

/// Per-pixel class logits for one sample (`3×H×W`).
#[derive(Debug, Clone, PartialEq)]
pub struct SegLogits {
    data: Tensor<f32>,
}

impl SegLogits {
    /// Splits a batched `N×3×H×W` logit tensor into samples.
    pub fn split<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<Self>> {
        let s = logits.shape();
        if s.c != NUM_CLASSES {
            return Err(Error::ShapeMismatch {
                context: "segmentation logits",
                expected: s.with_c(NUM_CLASSES),
                found: s,
            });
        }
        Ok((0..s.n).map(|n| SegLogits { data: logits.slice_batch(n).cast() }).collect())
    }

    pub fn height(&self) -> usize {
        self.data.shape().h
    }

    pub fn width(&self) -> usize {
        self.data.shape().w
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn argmax(&self) -> LabelMap {
        argmax_labels(&self.data).pop().expect("one sample")
    }
}

/// Per-pixel arg max over classes; ties go to the lower class index.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Vec<LabelMap> {
    let s = logits.shape();
    (0..s.n)
        .map(|n| {
            let data = (0..s.plane())
                .map(|i| {
                    let mut best = 0;
                    for c in 1..s.c {
                        if logits.plane(n, c)[i] > logits.plane(n, best)[i] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap::new(s.h, s.w, data).expect("indices below class count")
        })
        .collect()
}

/// Weighted cross-entropy averaged over every pixel in the batch, and its
/// gradient with respect to the logits.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[LabelMap], class_weights: [f64; NUM_CLASSES]) -> Result<(f64, Tensor<T>)> {
    let s = logits.shape();
    if s.c != NUM_CLASSES || labels.len() != s.n {
        return Err(Error::ShapeMismatch {
            context: "cross-entropy logits",
            expected: Shape::new(labels.len(), NUM_CLASSES, s.h, s.w),
            found: s,
        });
    }
    if class_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::invalid("class weights must be finite and non-negative"));
    }
    let count = (s.n * s.plane()) as f64;
    let mut grad = Tensor::zeros(s);
    let mut loss = 0.0;
    let mut probs = [0.0f64; NUM_CLASSES];
    for (n, label) in labels.iter().enumerate() {
        if (label.height(), label.width()) != (s.h, s.w) {
            return Err(Error::ShapeMismatch {
                context: "cross-entropy labels",
                expected: Shape::new(1, 1, s.h, s.w),
                found: Shape::new(1, 1, label.height(), label.width()),
            });
        }
        for (i, &y) in label.data().iter().enumerate() {
            for (c, p) in probs.iter_mut().enumerate() {
                *p = logits.plane(n, c)[i].to_f64().unwrap_or(f64::NAN);
            }
            let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(probs.iter().map(|&z| libm::exp(z - max)).sum::<f64>());
            let y = y as usize;
            let w = class_weights[y];
            loss += w * (lse - probs[y]);
            softmax_rows(&mut probs, NUM_CLASSES);
            for (c, &p) in probs.iter().enumerate() {
                let target = if c == y { 1.0 } else { 0.0 };
                grad.plane_mut(n, c)[i] = T::from_f64_lossy(w * (p - target) / count);
            }
        }
    }
    Ok((loss / count, grad))
}

/// The assembled network for one ablation variant.
#[derive(Debug, Clone)]
pub struct AmfNet<T> {
    spec: AblationSpec,
    config: NetworkConfig,
    pub rgb_encoder: Encoder<T>,
    pub depth_encoder: Encoder<T>,
    /// Index `n − 1` holds the fusion block after stage `n`, if any.
    pub fusion: Vec<Option<Amf<T>>>,
    pub decoder: Decoder<T>,
    pub head: Conv2d<T>,
    fused: Vec<FeatureMap<T>>,
}

impl<T: Scalar> Module<T> for AmfNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.rgb_encoder.visit(&join(prefix, "rgb_encoder"), f);
        self.depth_encoder.visit(&join(prefix, "depth_encoder"), f);
        let fusion = join(prefix, "fusion");
        for (i, amf) in self.fusion.iter().enumerate() {
            amf.visit(&join(&fusion, &format!("stage{}", i + 1)), f);
        }
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.rgb_encoder.visit_mut(&join(prefix, "rgb_encoder"), f);
        self.depth_encoder.visit_mut(&join(prefix, "depth_encoder"), f);
        let fusion = join(prefix, "fusion");
        for (i, amf) in self.fusion.iter_mut().enumerate() {
            amf.visit_mut(&join(&fusion, &format!("stage{}", i + 1)), f);
        }
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

impl<T: Scalar> AmfNet<T> {
    /// Deterministic in `config.seed`.
    pub fn build_variant(spec: AblationSpec, config: &NetworkConfig) -> Result<Self> {
        let mut rng = rng_from_seed(config.seed);
        let rgb_cfg = EncoderConfig { in_channels: 3, ..config.encoder.clone() };
        let depth_cfg = EncoderConfig { in_channels: 1, ..config.encoder.clone() };
        let rgb_encoder = Encoder::new(&rgb_cfg, config.input_hw, &mut rng)?;
        let depth_encoder = Encoder::new(&depth_cfg, config.input_hw, &mut rng)?;
        let channels = rgb_encoder.channels();
        let fusion = StageIndex::all()
            .map(|s| {
                let c = channels[s.zero_based()];
                spec.has_amf(s)
                    .then(|| Amf::new(c, config.amf_reduction.min(c), config.spatial_kernel, &mut rng))
                    .transpose()
            })
            .collect::<Result<_>>()?;
        let decoder = Decoder::new(channels, &mut rng)?;
        let head = Conv2d::new(decoder.output_channels(), NUM_CLASSES, 1, 1, 0, true, &mut rng);
        Ok(AmfNet {
            spec,
            config: config.clone(),
            rgb_encoder,
            depth_encoder,
            fusion,
            decoder,
            head,
            fused: Vec::new(),
        })
    }

    pub fn spec(&self) -> AblationSpec {
        self.spec
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn fingerprint(&self) -> String {
        self.config.fingerprint(self.spec)
    }

    fn check_input(&self, input: &NetworkInput<T>) -> Result<()> {
        let n = input.batch();
        input.rgb.ensure_shape(self.rgb_encoder.input_shape(n), "network rgb input")?;
        input.depth.ensure_shape(self.depth_encoder.input_shape(n), "network depth input")?;
        if input.masks.len() != NUM_STAGES {
            return Err(Error::invalid(format!("expected {NUM_STAGES} mask levels, got {}", input.masks.len())));
        }
        for (s, m) in StageIndex::all().zip(&input.masks) {
            let o = self.rgb_encoder.stage_output_shape(s, n);
            m.ensure_shape(Shape::new(n, 1, o.h, o.w), "network mask level")?;
        }
        Ok(())
    }

    /// Logits `N×3×H×W`.
    pub fn forward(&mut self, input: &NetworkInput<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let depth = self.depth_encoder.forward(&input.depth, mode)?;
        let fusion = &mut self.fusion;
        let mut fused = Vec::with_capacity(NUM_STAGES);
        self.rgb_encoder.forward_with(&input.rgb, mode, |stage, rgb| {
            let i = stage.zero_based();
            let f = match &mut fusion[i] {
                Some(amf) => amf.forward(rgb, &depth.stages[i], &input.masks[i], mode)?,
                None => rgb.add(&depth.stages[i])?,
            };
            fused.push(f.clone());
            Ok(Some(f))
        })?;
        let skips = [&fused[3], &fused[2], &fused[1], &fused[0]];
        let y = self.decoder.forward(&fused[4], &skips, mode)?;
        let logits = self.head.forward(&y, mode)?;
        self.fused = if mode.is_train() { fused } else { Vec::new() };
        Ok(logits)
    }

    /// Accumulates parameter gradients from `∂L/∂logits`.
    pub fn backward(&mut self, d_logits: &Tensor<T>) -> Result<()> {
        if self.fused.len() != NUM_STAGES {
            return Err(crate::nn::missing_cache("network"));
        }
        let d = self.head.backward(d_logits)?;
        let (d5, skip_grads) = self.decoder.backward(&d, NUM_STAGES - 1)?;
        let mut d_fused: Vec<Tensor<T>> = self.fused.iter().map(|f| Tensor::zeros(f.shape())).collect();
        d_fused[4] = d5;
        for (j, g) in skip_grads.iter().enumerate() {
            d_fused[3 - j].add_assign(g)?;
        }
        let mut d_depth: Vec<Tensor<T>> = vec![Tensor::zeros(Shape::new(0, 0, 0, 0)); NUM_STAGES];
        for stage in StageIndex::all().rev() {
            let i = stage.zero_based();
            let (d_rgb, d_dep) = match &mut self.fusion[i] {
                Some(amf) => amf.backward(&d_fused[i])?,
                None => (d_fused[i].clone(), d_fused[i].clone()),
            };
            d_depth[i] = d_dep;
            let d_in = self.rgb_encoder.backward_stage(stage, &d_rgb)?;
            if i > 0 {
                d_fused[i - 1].add_assign(&d_in)?;
            }
        }
        let mut carry: Option<Tensor<T>> = None;
        for stage in StageIndex::all().rev() {
            let mut d = core::mem::replace(&mut d_depth[stage.zero_based()], Tensor::zeros(Shape::new(0, 0, 0, 0)));
            if let Some(c) = carry {
                d.add_assign(&c)?;
            }
            carry = Some(self.depth_encoder.backward_stage(stage, &d)?);
        }
        self.fused.clear();
        Ok(())
    }

    /// Fusion outputs of the last training-mode forward, stages 1 to 5.
    pub fn last_fused(&self) -> &[FeatureMap<T>] {
        &self.fused
    }

    /// Pre-attention fusion of each AMF stage from the last training forward.
    pub fn pre_attention(&self, stage: StageIndex) -> Option<&Tensor<T>> {
        self.fusion[stage.zero_based()].as_ref()?.last_pre_attention()
    }

    pub fn fusion_diagnostics(&self) -> Vec<(StageIndex, AmfDiagnostics)> {
        StageIndex::all()
            .filter_map(|s| {
                let d = self.fusion[s.zero_based()].as_ref()?.last_diagnostics()?;
                Some((s, d.clone()))
            })
            .collect()
    }

    /// Inference on one image pair.
    pub fn predict(&mut self, rgb: &RgbImage, depth: &DepthImage, depth_divisor: f32) -> Result<SegLogits> {
        let input = NetworkInput::from_images(&[(rgb, depth)], depth_divisor)?;
        let logits = self.forward(&input, Mode::Eval)?;
        Ok(SegLogits::split(&logits)?.remove(0))
    }
}
