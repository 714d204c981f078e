//! Adaptive-mask fusion of RGB and depth feature maps.
//!
//! An AMF block weighs the two modalities with a per-sample softmax pair,
//! multiplies the depth weight by the binary validity mask, and uses the
//! complement as the RGB mask:
//!
//! ```text
//! m_depth = w_depth · M        m_rgb = 1 − m_depth
//! fused   = rgb ⊙ m_rgb + depth ⊙ m_depth
//! out     = spatial_attention(channel_attention(fused))
//! ```
//!
//! Where `M = 0` the fused value is the RGB feature, whatever the depth
//! branch produced there.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, missing_cache, relu_backward, relu_inplace, sigmoid, softmax_backward,
    softmax_rows, BatchNorm, Conv2d, InitRng, Linear, Mode,
};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::types::Mask;

/// Softmax pair for one sample. `w_rgb + w_depth = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveWeights<T> {
    /// Computed for introspection; the RGB mask derives from `1 − m_depth`.
    pub w_rgb: T,
    pub w_depth: T,
}

impl<T: Scalar> AdaptiveWeights<T> {
    /// Softmax over `[rgb_logit, depth_logit]`.
    pub fn from_logits(rgb_logit: T, depth_logit: T) -> Self {
        let mut p = [rgb_logit, depth_logit];
        softmax_rows(&mut p, 2);
        AdaptiveWeights { w_rgb: p[0], w_depth: p[1] }
    }
}

/// Complementary soft masks, each `N × 1 × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveMaskPair<T> {
    pub m_rgb: Tensor<T>,
    pub m_depth: Tensor<T>,
}

fn check_binary<T: Scalar>(mask: &Tensor<T>) -> Result<()> {
    if let Some(index) = mask.data().iter().position(|&v| v != T::zero() && v != T::one()) {
        return Err(Error::NonBinaryMask { index, value: 2 });
    }
    Ok(())
}

/// `m_depth = w_depth · mask`, `m_rgb = 1 − m_depth`, one weight per sample.
pub fn make_adaptive_masks_batch<T: Scalar>(weights: &[AdaptiveWeights<T>], mask: &Tensor<T>) -> Result<AdaptiveMaskPair<T>> {
    let s = mask.shape();
    if s.c != 1 || weights.len() != s.n {
        return Err(Error::ShapeMismatch {
            context: "adaptive mask input",
            expected: Shape::new(weights.len(), 1, s.h, s.w),
            found: s,
        });
    }
    for w in weights {
        for v in [w.w_rgb, w.w_depth] {
            if !(v >= T::zero() && v <= T::one()) {
                return Err(Error::invalid(alloc::format!("adaptive weight {v} outside [0,1]")));
            }
        }
    }
    check_binary(mask)?;
    let mut m_depth = Tensor::zeros(s);
    let mut m_rgb = Tensor::zeros(s);
    for (n, w) in weights.iter().enumerate() {
        for ((d, r), &m) in m_depth.plane_mut(n, 0).iter_mut().zip(m_rgb.plane_mut(n, 0)).zip(mask.plane(n, 0)) {
            *d = w.w_depth * m;
            *r = T::one() - *d;
        }
    }
    Ok(AdaptiveMaskPair { m_rgb, m_depth })
}

/// Single-sample form of [`make_adaptive_masks_batch`].
pub fn make_adaptive_masks<T: Scalar>(weights: AdaptiveWeights<T>, mask: &Mask) -> Result<AdaptiveMaskPair<T>> {
    make_adaptive_masks_batch(&[weights], &mask.to_feature_map().cast())
}

/// `rgb ⊙ m_rgb + depth ⊙ m_depth`, masks broadcast over channels.
pub fn masked_fuse<T: Scalar>(rgb: &Tensor<T>, depth: &Tensor<T>, masks: &AdaptiveMaskPair<T>) -> Result<Tensor<T>> {
    let s = rgb.shape();
    depth.ensure_shape(s, "masked fusion depth features")?;
    let ms = Shape::new(s.n, 1, s.h, s.w);
    masks.m_rgb.ensure_shape(ms, "masked fusion rgb mask")?;
    masks.m_depth.ensure_shape(ms, "masked fusion depth mask")?;
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        let mr = masks.m_rgb.plane(n, 0);
        let md = masks.m_depth.plane(n, 0);
        for c in 0..s.c {
            let (r, d) = (rgb.plane(n, c), depth.plane(n, c));
            for (i, o) in out.plane_mut(n, c).iter_mut().enumerate() {
                *o = r[i] * mr[i] + d[i] * md[i];
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct AmgCache<T> {
    input: Shape,
    h1: Tensor<T>,
    h2: Tensor<T>,
    probs: Vec<T>,
}

/// Adaptive mask generation: pooled concatenation → two FC-BN-ReLU layers
/// → FC-BN-Softmax over two logits.
#[derive(Debug, Clone)]
pub struct Amg<T> {
    pub fc1: Linear<T>,
    pub bn1: BatchNorm<T>,
    pub fc2: Linear<T>,
    pub bn2: BatchNorm<T>,
    pub fc3: Linear<T>,
    pub bn3: BatchNorm<T>,
    cache: Option<AmgCache<T>>,
}

crate::module_fields!(Amg { fc1, bn1, fc2, bn2, fc3, bn3 });

impl<T: Scalar> Amg<T> {
    /// Hidden widths `2C/4` then `2C/16`, never below one.
    pub fn new(channels: usize, rng: &mut InitRng) -> Self {
        let cat = 2 * channels;
        let h1 = (cat / 4).max(1);
        let h2 = (cat / 16).max(1);
        Amg {
            fc1: Linear::new(cat, h1, false, rng),
            bn1: BatchNorm::new(h1),
            fc2: Linear::new(h1, h2, false, rng),
            bn2: BatchNorm::new(h2),
            fc3: Linear::new(h2, 2, false, rng),
            bn3: BatchNorm::new(2),
            cache: None,
        }
    }

    /// Pre-softmax logits `[rgb, depth]` per sample.
    pub fn logits(&mut self, rgb: &Tensor<T>, depth: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = rgb.shape();
        depth.ensure_shape(s, "adaptive mask generation depth features")?;
        let pr = global_avg_pool(rgb);
        let pd = global_avg_pool(depth);
        let pooled = Tensor::from_fn(Shape::new(s.n, 2 * s.c, 1, 1), |n, c, _, _| {
            if c < s.c {
                pr.at(n, c, 0, 0)
            } else {
                pd.at(n, c - s.c, 0, 0)
            }
        });
        let mut h1 = self.bn1.forward(&self.fc1.forward(&pooled, mode)?, mode)?;
        relu_inplace(&mut h1);
        let mut h2 = self.bn2.forward(&self.fc2.forward(&h1, mode)?, mode)?;
        relu_inplace(&mut h2);
        let z = self.bn3.forward(&self.fc3.forward(&h2, mode)?, mode)?;
        if mode.is_train() {
            self.cache = Some(AmgCache {
                input: s,
                h1,
                h2,
                probs: Vec::new(),
            });
        }
        Ok(z)
    }

    pub fn forward(&mut self, rgb: &Tensor<T>, depth: &Tensor<T>, mode: Mode) -> Result<Vec<AdaptiveWeights<T>>> {
        let z = self.logits(rgb, depth, mode)?;
        let weights: Vec<_> = z.data().chunks(2).map(|p| AdaptiveWeights::from_logits(p[0], p[1])).collect();
        if let Some(c) = &mut self.cache {
            c.probs = weights.iter().flat_map(|w| [w.w_rgb, w.w_depth]).collect();
        }
        Ok(weights)
    }

    /// Backward from `∂L/∂w_depth` per sample (the RGB weight is unused
    /// downstream). Returns gradients for the RGB and depth feature maps.
    pub fn backward(&mut self, d_w_depth: &[T]) -> Result<(Tensor<T>, Tensor<T>)> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("adaptive mask generation"))?;
        let s = cache.input;
        if d_w_depth.len() != s.n || cache.probs.len() != 2 * s.n {
            return Err(Error::invalid("adaptive mask generation backward: batch size mismatch"));
        }
        let mut dz = vec![T::zero(); 2 * s.n];
        for n in 0..s.n {
            softmax_backward(&cache.probs[2 * n..2 * n + 2], &[T::zero(), d_w_depth[n]], &mut dz[2 * n..2 * n + 2]);
        }
        let dz = Tensor::from_vec(Shape::new(s.n, 2, 1, 1), dz)?;
        let mut dh2 = self.fc3.backward(&self.bn3.backward(&dz)?)?;
        relu_backward(&mut dh2, &cache.h2);
        let mut dh1 = self.fc2.backward(&self.bn2.backward(&dh2)?)?;
        relu_backward(&mut dh1, &cache.h1);
        let dpooled = self.fc1.backward(&self.bn1.backward(&dh1)?)?;
        let half = |offset: usize| Tensor::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| dpooled.at(n, c + offset, 0, 0));
        Ok((global_avg_pool_backward(&half(0), s), global_avg_pool_backward(&half(s.c), s)))
    }
}

#[derive(Debug, Clone)]
struct ChannelCache<T> {
    x: Tensor<T>,
    hidden: Tensor<T>,
    gate: Tensor<T>,
}

/// Squeeze-and-excitation style channel gate: pool → FC-BN-ReLU → FC → sigmoid.
#[derive(Debug, Clone)]
pub struct ChannelAttention<T> {
    pub fc1: Linear<T>,
    pub bn: BatchNorm<T>,
    pub fc2: Linear<T>,
    cache: Option<ChannelCache<T>>,
}

crate::module_fields!(ChannelAttention { fc1, bn, fc2 });

impl<T: Scalar> ChannelAttention<T> {
    /// Hidden width `channels / reduction`.
    pub fn new(channels: usize, reduction: usize, rng: &mut InitRng) -> Result<Self> {
        if reduction == 0 || channels < reduction {
            return Err(Error::invalid(alloc::format!(
                "channel attention needs channels ({channels}) >= reduction ({reduction}) > 0"
            )));
        }
        let hidden = channels / reduction;
        Ok(ChannelAttention {
            fc1: Linear::new(channels, hidden, false, rng),
            bn: BatchNorm::new(hidden),
            fc2: Linear::new(hidden, channels, true, rng),
            cache: None,
        })
    }

    /// Reduction ratio 16, capped at the channel count for narrow maps.
    pub fn with_default_reduction(channels: usize, rng: &mut InitRng) -> Result<Self> {
        Self::new(channels, 16.min(channels), rng)
    }

    /// Per-channel gates in `(0, 1)`, `N × C × 1 × 1`.
    pub fn gates(&mut self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tensor<T>)> {
        let pooled = global_avg_pool(x);
        let mut hidden = self.bn.forward(&self.fc1.forward(&pooled, mode)?, mode)?;
        relu_inplace(&mut hidden);
        let gate = self.fc2.forward(&hidden, mode)?.map(sigmoid);
        Ok((hidden, gate))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = x.shape();
        let (hidden, gate) = self.gates(x, mode)?;
        let mut y = x.clone();
        for n in 0..s.n {
            for c in 0..s.c {
                let g = gate.at(n, c, 0, 0);
                for v in y.plane_mut(n, c) {
                    *v *= g;
                }
            }
        }
        self.cache = mode.is_train().then(|| ChannelCache { x: x.clone(), hidden, gate });
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("channel attention"))?;
        let s = cache.x.shape();
        dy.ensure_shape(s, "channel attention backward")?;
        let mut dx = dy.clone();
        let dz = Tensor::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| {
            let g = cache.gate.at(n, c, 0, 0);
            let ds: T = dy.plane(n, c).iter().zip(cache.x.plane(n, c)).map(|(&a, &b)| a * b).sum();
            ds * g * (T::one() - g)
        });
        for n in 0..s.n {
            for c in 0..s.c {
                let g = cache.gate.at(n, c, 0, 0);
                for v in dx.plane_mut(n, c) {
                    *v *= g;
                }
            }
        }
        let mut dh = self.fc2.backward(&dz)?;
        relu_backward(&mut dh, &cache.hidden);
        let dpooled = self.fc1.backward(&self.bn.backward(&dh)?)?;
        dx.add_assign(&global_avg_pool_backward(&dpooled, s))?;
        Ok(dx)
    }
}

/// Spatial gate: convolution to one channel → sigmoid → broadcast multiply.
#[derive(Debug, Clone)]
pub struct SpatialAttention<T> {
    pub conv: Conv2d<T>,
    cache: Option<(Tensor<T>, Tensor<T>)>,
}

crate::module_fields!(SpatialAttention { conv });

impl<T: Scalar> SpatialAttention<T> {
    pub fn new(channels: usize, kernel: usize, rng: &mut InitRng) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::invalid(alloc::format!("spatial attention kernel {kernel} must be odd")));
        }
        Ok(SpatialAttention {
            conv: Conv2d::same_fan_in(channels, 1, kernel, true, rng),
            cache: None,
        })
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = x.shape();
        let gate = self.conv.forward(x, mode)?.map(sigmoid);
        let mut y = x.clone();
        for n in 0..s.n {
            let g = gate.plane(n, 0);
            for c in 0..s.c {
                for (v, &gv) in y.plane_mut(n, c).iter_mut().zip(g) {
                    *v *= gv;
                }
            }
        }
        self.cache = mode.is_train().then(|| (x.clone(), gate));
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let (x, gate) = self.cache.take().ok_or_else(|| missing_cache("spatial attention"))?;
        let s = x.shape();
        dy.ensure_shape(s, "spatial attention backward")?;
        let mut dz = Tensor::zeros(gate.shape());
        let mut dx = dy.clone();
        for n in 0..s.n {
            let g = gate.plane(n, 0).to_vec();
            let dzp = dz.plane_mut(n, 0);
            for c in 0..s.c {
                for (i, (&d, &xv)) in dy.plane(n, c).iter().zip(x.plane(n, c)).enumerate() {
                    dzp[i] += d * xv;
                }
                for (v, &gv) in dx.plane_mut(n, c).iter_mut().zip(&g) {
                    *v *= gv;
                }
            }
            for (d, &gv) in dzp.iter_mut().zip(&g) {
                *d *= gv * (T::one() - gv);
            }
        }
        dx.add_assign(&self.conv.backward(&dz)?)?;
        Ok(dx)
    }
}

/// Summary of one AMF forward pass, for visualization dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct AmfDiagnostics {
    pub w_rgb: Vec<f64>,
    pub w_depth: Vec<f64>,
    pub m_depth_mean: f64,
    pub m_depth_max: f64,
    pub valid_fraction: f64,
}

#[derive(Debug, Clone)]
struct AmfCache<T> {
    rgb: Tensor<T>,
    depth: Tensor<T>,
    mask: Tensor<T>,
    masks: AdaptiveMaskPair<T>,
    pre_attention: Tensor<T>,
}

/// Full fusion block: AMG → masked fusion → channel gate → spatial gate.
#[derive(Debug, Clone)]
pub struct Amf<T> {
    pub amg: Amg<T>,
    pub channel: ChannelAttention<T>,
    pub spatial: SpatialAttention<T>,
    cache: Option<AmfCache<T>>,
    diagnostics: Option<AmfDiagnostics>,
}

crate::module_fields!(Amf { amg, channel, spatial });

impl<T: Scalar> Amf<T> {
    pub fn new(channels: usize, reduction: usize, kernel: usize, rng: &mut InitRng) -> Result<Self> {
        Ok(Amf {
            amg: Amg::new(channels, rng),
            channel: ChannelAttention::new(channels, reduction, rng)?,
            spatial: SpatialAttention::new(channels, kernel, rng)?,
            cache: None,
            diagnostics: None,
        })
    }

    /// Reduction 16 (capped at the channel count) and a 7×7 spatial kernel.
    pub fn with_defaults(channels: usize, rng: &mut InitRng) -> Result<Self> {
        Self::new(channels, 16.min(channels), 7, rng)
    }

    /// `mask` is `N × 1 × H × W` with values in {0, 1}.
    pub fn forward(&mut self, rgb: &Tensor<T>, depth: &Tensor<T>, mask: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = rgb.shape();
        depth.ensure_shape(s, "fusion depth features")?;
        mask.ensure_shape(Shape::new(s.n, 1, s.h, s.w), "fusion mask")?;
        let weights = self.amg.forward(rgb, depth, mode)?;
        let masks = make_adaptive_masks_batch(&weights, mask)?;
        let fused = masked_fuse(rgb, depth, &masks)?;
        let y = self.spatial.forward(&self.channel.forward(&fused, mode)?, mode)?;
        self.diagnostics = Some(diagnostics(&weights, &masks, mask));
        self.cache = mode.is_train().then(|| AmfCache {
            rgb: rgb.clone(),
            depth: depth.clone(),
            mask: mask.clone(),
            masks,
            pre_attention: fused,
        });
        Ok(y)
    }

    /// Returns gradients for the RGB and depth feature maps.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("adaptive-mask fusion"))?;
        let s = cache.rgb.shape();
        let d_fused = self.channel.backward(&self.spatial.backward(dy)?)?;
        let mut d_rgb = Tensor::zeros(s);
        let mut d_depth = Tensor::zeros(s);
        let mut d_w = vec![T::zero(); s.n];
        for n in 0..s.n {
            let mr = cache.masks.m_rgb.plane(n, 0);
            let md = cache.masks.m_depth.plane(n, 0);
            let m = cache.mask.plane(n, 0);
            for c in 0..s.c {
                let g = d_fused.plane(n, c);
                let (r, d) = (cache.rgb.plane(n, c), cache.depth.plane(n, c));
                let mut acc = T::zero();
                for i in 0..g.len() {
                    acc += g[i] * m[i] * (d[i] - r[i]);
                }
                d_w[n] += acc;
                for ((o, &gi), &mi) in d_rgb.plane_mut(n, c).iter_mut().zip(g).zip(mr) {
                    *o = gi * mi;
                }
                for ((o, &gi), &mi) in d_depth.plane_mut(n, c).iter_mut().zip(g).zip(md) {
                    *o = gi * mi;
                }
            }
        }
        let (g_rgb, g_depth) = self.amg.backward(&d_w)?;
        d_rgb.add_assign(&g_rgb)?;
        d_depth.add_assign(&g_depth)?;
        Ok((d_rgb, d_depth))
    }

    /// Masked fusion result of the last training-mode forward, before the
    /// attention gates.
    pub fn last_pre_attention(&self) -> Option<&Tensor<T>> {
        self.cache.as_ref().map(|c| &c.pre_attention)
    }

    pub fn last_diagnostics(&self) -> Option<&AmfDiagnostics> {
        self.diagnostics.as_ref()
    }
}

fn diagnostics<T: Scalar>(weights: &[AdaptiveWeights<T>], masks: &AdaptiveMaskPair<T>, mask: &Tensor<T>) -> AmfDiagnostics {
    let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
    let md = masks.m_depth.data();
    let count = md.len().max(1) as f64;
    AmfDiagnostics {
        w_rgb: weights.iter().map(|w| f(w.w_rgb)).collect(),
        w_depth: weights.iter().map(|w| f(w.w_depth)).collect(),
        m_depth_mean: md.iter().map(|&v| f(v)).sum::<f64>() / count,
        m_depth_max: md.iter().map(|&v| f(v)).fold(0.0, f64::max),
        valid_fraction: mask.data().iter().map(|&v| f(v)).sum::<f64>() / count,
    }
}
