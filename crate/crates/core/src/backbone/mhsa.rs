use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{missing_cache, Conv2d, InitRng, Mode, Param};
use crate::scalar::{cst, Scalar};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone)]
struct AttnCache<T> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// `[n][head][query][key]`
    attn: Vec<T>,
}

/// Multi-head self-attention over all spatial positions with learned 2-D
/// relative position logits.
///
/// For query position `(i, j)` and key position `(k, l)` the logit is
/// `q · (key + r_h[k - i] + r_w[l - j]) / sqrt(d)`. The position tables
/// are sized for a fixed `height × width`.
#[derive(Debug, Clone)]
pub struct Mhsa<T> {
    pub query: Conv2d<T>,
    pub key: Conv2d<T>,
    pub value: Conv2d<T>,
    /// `(2H - 1) × d` stored as `1 × 1 × (2H-1) × d`
    pub rel_height: Param<T>,
    /// `(2W - 1) × d`
    pub rel_width: Param<T>,
    heads: usize,
    height: usize,
    width: usize,
    cache: Option<AttnCache<T>>,
}

crate::module_fields!(Mhsa { query, key, value, rel_height, rel_width });

impl<T: Scalar> Mhsa<T> {
    pub fn new(channels: usize, heads: usize, height: usize, width: usize, rng: &mut InitRng) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::invalid(alloc::format!(
                "{channels} channels are not divisible into {heads} attention heads"
            )));
        }
        let d = channels / heads;
        let std = (d as f64).powf(-0.5);
        Ok(Mhsa {
            query: Conv2d::new(channels, channels, 1, 1, 0, false, rng),
            key: Conv2d::new(channels, channels, 1, 1, 0, false, rng),
            value: Conv2d::new(channels, channels, 1, 1, 0, false, rng),
            rel_height: Param::new(crate::nn::init::normal(Shape::new(1, 1, 2 * height - 1, d), std, rng)),
            rel_width: Param::new(crate::nn::init::normal(Shape::new(1, 1, 2 * width - 1, d), std, rng)),
            heads,
            height,
            width,
            cache: None,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn head_dim(&self) -> usize {
        self.query.out_channels() / self.heads
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        let c = self.query.in_channels();
        let expected = Shape::new(s.n, c, self.height, self.width);
        if s != expected {
            return Err(Error::ShapeMismatch {
                context: "self-attention input",
                expected,
                found: s,
            });
        }
        Ok(())
    }

    /// Softmax-normalized attention weights, `[n][head][query][key]`.
    fn attention(&self, q: &Tensor<T>, k: &Tensor<T>) -> Vec<T> {
        let s = q.shape();
        let (h, w, d) = (self.height, self.width, self.head_dim());
        let l = h * w;
        let scale = T::one() / cst::<T>(d as f64).sqrt();
        let rh = self.rel_height.value.data();
        let rw = self.rel_width.value.data();
        let mut attn = vec![T::zero(); s.n * self.heads * l * l];
        let mut qv = vec![T::zero(); d];
        let mut pos_h = vec![T::zero(); 2 * h - 1];
        let mut pos_w = vec![T::zero(); 2 * w - 1];
        for n in 0..s.n {
            for head in 0..self.heads {
                let block = &mut attn[(n * self.heads + head) * l * l..(n * self.heads + head + 1) * l * l];
                for i in 0..l {
                    for (dd, qd) in qv.iter_mut().enumerate() {
                        *qd = q.plane(n, head * d + dd)[i];
                    }
                    for (o, p) in pos_h.iter_mut().enumerate() {
                        *p = (0..d).map(|dd| qv[dd] * rh[o * d + dd]).sum();
                    }
                    for (o, p) in pos_w.iter_mut().enumerate() {
                        *p = (0..d).map(|dd| qv[dd] * rw[o * d + dd]).sum();
                    }
                    let (qi, qj) = (i / w, i % w);
                    let row = &mut block[i * l..(i + 1) * l];
                    for (dd, &qd) in qv.iter().enumerate() {
                        let kp = k.plane(n, head * d + dd);
                        for (r, &kv) in row.iter_mut().zip(kp) {
                            *r += qd * kv;
                        }
                    }
                    for (j, r) in row.iter_mut().enumerate() {
                        let (kj, kl) = (j / w, j % w);
                        *r = (*r + pos_h[kj + h - 1 - qi] + pos_w[kl + w - 1 - qj]) * scale;
                    }
                }
                crate::nn::softmax_rows(block, l);
            }
        }
        attn
    }

    /// Attention weights for `x` without recording state.
    pub fn attention_weights(&mut self, x: &Tensor<T>) -> Result<Vec<T>> {
        self.check_input(x.shape())?;
        let q = self.query.forward(x, Mode::Eval)?;
        let k = self.key.forward(x, Mode::Eval)?;
        Ok(self.attention(&q, &k))
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let s = x.shape();
        self.check_input(s)?;
        let q = self.query.forward(x, mode)?;
        let k = self.key.forward(x, mode)?;
        let v = self.value.forward(x, mode)?;
        let attn = self.attention(&q, &k);
        let (d, l) = (self.head_dim(), s.plane());
        let mut out = Tensor::zeros(s);
        for n in 0..s.n {
            for head in 0..self.heads {
                let a = &attn[(n * self.heads + head) * l * l..(n * self.heads + head + 1) * l * l];
                for dd in 0..d {
                    let c = head * d + dd;
                    // out[c, i] = sum_j a[i, j] v[c, j]
                    T::gemm(l, l, 1, T::one(), a, (l, 1), v.plane(n, c), (1, 1), T::zero(), out.plane_mut(n, c), (1, 1));
                }
            }
        }
        self.cache = mode.is_train().then_some(AttnCache { q, k, v, attn });
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("self-attention"))?;
        let s = cache.q.shape();
        dy.ensure_shape(s, "self-attention backward")?;
        let (h, w, d) = (self.height, self.width, self.head_dim());
        let l = h * w;
        let scale = T::one() / cst::<T>(d as f64).sqrt();
        let mut dq = Tensor::zeros(s);
        let mut dk = Tensor::zeros(s);
        let mut dv = Tensor::zeros(s);
        let mut dlogits = vec![T::zero(); l * l];
        let mut dattn = vec![T::zero(); l * l];
        let rh = self.rel_height.value.data().to_vec();
        let rw = self.rel_width.value.data().to_vec();
        for n in 0..s.n {
            for head in 0..self.heads {
                let a = &cache.attn[(n * self.heads + head) * l * l..(n * self.heads + head + 1) * l * l];
                dattn.fill(T::zero());
                for dd in 0..d {
                    let c = head * d + dd;
                    let g = dy.plane(n, c);
                    let vp = cache.v.plane(n, c);
                    // dattn[i, j] += g[i] v[j]
                    for i in 0..l {
                        let gi = g[i];
                        for (da, &vj) in dattn[i * l..(i + 1) * l].iter_mut().zip(vp) {
                            *da += gi * vj;
                        }
                    }
                    // dv[j] = sum_i a[i, j] g[i]
                    T::gemm(l, l, 1, T::one(), a, (1, l), g, (1, 1), T::zero(), dv.plane_mut(n, c), (1, 1));
                }
                for i in 0..l {
                    crate::nn::softmax_backward(&a[i * l..(i + 1) * l], &dattn[i * l..(i + 1) * l], &mut dlogits[i * l..(i + 1) * l]);
                }
                for v in dlogits.iter_mut() {
                    *v *= scale;
                }
                for i in 0..l {
                    let (qi, qj) = (i / w, i % w);
                    let row = &dlogits[i * l..(i + 1) * l];
                    for dd in 0..d {
                        let c = head * d + dd;
                        let kp = cache.k.plane(n, c);
                        let mut acc = T::zero();
                        for (j, &g) in row.iter().enumerate() {
                            let (kj, kl) = (j / w, j % w);
                            acc += g * (kp[j] + rh[(kj + h - 1 - qi) * d + dd] + rw[(kl + w - 1 - qj) * d + dd]);
                        }
                        dq.plane_mut(n, c)[i] = acc;
                        let qv = cache.q.plane(n, c)[i];
                        let dkp = dk.plane_mut(n, c);
                        for (j, &g) in row.iter().enumerate() {
                            dkp[j] += g * qv;
                        }
                        let grh = self.rel_height.grad.data_mut();
                        for (j, &g) in row.iter().enumerate() {
                            grh[(j / w + h - 1 - qi) * d + dd] += g * qv;
                        }
                        let grw = self.rel_width.grad.data_mut();
                        for (j, &g) in row.iter().enumerate() {
                            grw[(j % w + w - 1 - qj) * d + dd] += g * qv;
                        }
                    }
                }
            }
        }
        let mut dx = self.query.backward(&dq)?;
        dx.add_assign(&self.key.backward(&dk)?)?;
        dx.add_assign(&self.value.backward(&dv)?)?;
        Ok(dx)
    }
}
