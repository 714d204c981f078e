//! Reference implementations and a finite-difference checker for the
//! acceptance suite, written with plain loops in `f64` independently of the
//! library kernels.

use std::collections::BTreeMap;

use amfnet_core::nn::Module;
use amfnet_core::tensor::{Shape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const BN_EPS: f64 = 1e-5;

pub fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

pub fn named<M: Module<f64>>(m: &M) -> BTreeMap<String, Tensor<f64>> {
    let mut out = BTreeMap::new();
    m.visit("", &mut |n, p| {
        out.insert(n.to_string(), p.value.clone());
    });
    out
}

/// Gives every batch norm non-trivial affine parameters and running
/// statistics, and every bias a non-zero value.
pub fn randomize_norms<M: Module<f64>>(m: &mut M, rng: &mut ChaCha8Rng) {
    m.visit_mut("", &mut |n, p| {
        let (lo, hi) = if n.ends_with("running_var") || n.ends_with("gamma") {
            (0.5, 1.5)
        } else if n.ends_with("running_mean") || n.ends_with("beta") || n.ends_with("bias") {
            (-0.5, 0.5)
        } else {
            return;
        };
        for v in p.value.data_mut() {
            *v = rng.random_range(lo..hi);
        }
    });
}

pub fn conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let s = x.shape();
    let (out_c, k) = (w.shape().n, w.shape().h);
    let oh = (s.h + 2 * pad - k) / stride + 1;
    let ow = (s.w + 2 * pad - k) / stride + 1;
    Tensor::from_fn(Shape::new(s.n, out_c, oh, ow), |n, o, y, xo| {
        let mut acc = b.map_or(0.0, |b| b.data()[o]);
        for c in 0..s.c {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (y * stride + ky) as isize - pad as isize;
                    let ix = (xo * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < s.h && (ix as usize) < s.w {
                        acc += w.at(o, c, ky, kx) * x.at(n, c, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

/// Evaluation-mode batch norm with parameters under `prefix`.
pub fn bn_eval(x: &Tensor<f64>, p: &BTreeMap<String, Tensor<f64>>, prefix: &str) -> Tensor<f64> {
    let g = |k: &str| &p[&format!("{prefix}.{k}")];
    let (gamma, beta, mean, var) = (g("gamma"), g("beta"), g("running_mean"), g("running_var"));
    Tensor::from_fn(x.shape(), |n, c, y, xx| {
        (x.at(n, c, y, xx) - mean.data()[c]) / (var.data()[c] + BN_EPS).sqrt() * gamma.data()[c] + beta.data()[c]
    })
}

pub fn relu(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `N × C × 1 × 1` per-channel means.
pub fn avg_pool(x: &Tensor<f64>) -> Tensor<f64> {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, 1, 1), |n, c, _, _| x.plane(n, c).iter().sum::<f64>() / s.plane() as f64)
}

pub fn linear(x: &Tensor<f64>, p: &BTreeMap<String, Tensor<f64>>, prefix: &str) -> Tensor<f64> {
    let w = &p[&format!("{prefix}.weight")];
    let b = p.get(&format!("{prefix}.bias"));
    let (out, inp) = (w.shape().n, w.shape().c);
    Tensor::from_fn(Shape::new(x.shape().n, out, 1, 1), |n, o, _, _| {
        let mut acc = b.map_or(0.0, |b| b.data()[o]);
        for i in 0..inp {
            acc += w.at(o, i, 0, 0) * x.at(n, i, 0, 0);
        }
        acc
    })
}

/// Convolution (no bias), evaluation batch norm, ReLU.
pub fn cbr(x: &Tensor<f64>, p: &BTreeMap<String, Tensor<f64>>, prefix: &str, pad: usize) -> Tensor<f64> {
    let w = &p[&format!("{prefix}.conv.weight")];
    relu(&bn_eval(&conv2d(x, w, None, 1, pad), p, &format!("{prefix}.bn")))
}

pub fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_fn(a.shape(), |n, c, y, x| a.at(n, c, y, x) + b.at(n, c, y, x))
}

/// Scales every channel plane by `g[n][c]` (`N × C × 1 × 1`) or every pixel
/// by `g[n][0][y][x]` (`N × 1 × H × W`).
pub fn gate(x: &Tensor<f64>, g: &Tensor<f64>) -> Tensor<f64> {
    let gs = g.shape();
    Tensor::from_fn(x.shape(), |n, c, y, xx| {
        let v = if gs.plane() == 1 { g.at(n, c, 0, 0) } else { g.at(n, 0, y, xx) };
        x.at(n, c, y, xx) * v
    })
}

pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Central differences of `f` at zero over a ladder of decreasing steps.
/// Stops at the first step whose estimate agrees with the previous one to
/// `1e-5` relative; otherwise returns the finer estimate of the consecutive
/// pair that agrees best.
pub fn derivative(steps: &[f64], mut f: impl FnMut(f64) -> f64) -> f64 {
    let mut est: Vec<f64> = Vec::with_capacity(steps.len());
    for &h in steps {
        let e = (f(h) - f(-h)) / (2.0 * h);
        if let Some(&prev) = est.last() {
            if (e - prev).abs() <= 1e-5 * e.abs().max(prev.abs()) {
                return e;
            }
        }
        est.push(e);
    }
    let best = (1..est.len()).min_by(|&a, &b| (est[a] - est[a - 1]).abs().total_cmp(&(est[b] - est[b - 1]).abs()));
    est[best.unwrap_or(0)]
}

/// Worst relative error over inputs and parameter groups.
#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub worst: f64,
    pub worst_name: String,
    pub groups: usize,
}

impl GradReport {
    fn record(&mut self, name: &str, err: f64) {
        self.groups += 1;
        if err > self.worst || self.worst_name.is_empty() {
            self.worst = err;
            self.worst_name = name.to_string();
        }
    }
}

/// Analytic gradients of `Σ r ⊙ forward(inputs)` against [`derivative`]
/// over `steps`, both in `f64`.
///
/// `coords` limits each parameter group to that many coordinates, its
/// largest-magnitude one plus random others (all of them when `None`).
/// Inputs are checked in full when `check_inputs` is set. `floor` bounds
/// the relative-error denominator from below.
#[allow(clippy::too_many_arguments)]
pub fn check_grads<M, F, B>(
    module: &mut M,
    inputs: &[Tensor<f64>],
    mut forward: F,
    mut backward: B,
    steps: &[f64],
    coords: Option<usize>,
    check_inputs: bool,
    floor: f64,
    rng: &mut ChaCha8Rng,
) -> GradReport
where
    M: Module<f64>,
    F: FnMut(&mut M, &[Tensor<f64>]) -> Tensor<f64>,
    B: FnMut(&mut M, &Tensor<f64>) -> Vec<Tensor<f64>>,
{
    let y = forward(module, inputs);
    let r = random(y.shape(), rng);
    module.zero_grad();
    let input_grads = backward(module, &r);
    let mut loss = |m: &mut M, xs: &[Tensor<f64>]| -> f64 {
        let y = forward(m, xs);
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let mut report = GradReport::default();

    if check_inputs {
        for (i, x) in inputs.iter().enumerate() {
            let mut xs = inputs.to_vec();
            let mut numeric = Vec::with_capacity(x.data().len());
            for j in 0..x.data().len() {
                let orig = xs[i].data()[j];
                numeric.push(derivative(steps, |d| {
                    xs[i].data_mut()[j] = orig + d;
                    let v = loss(module, &xs);
                    xs[i].data_mut()[j] = orig;
                    v
                }));
            }
            report.record(&format!("input {i}"), rel_err(input_grads[i].data(), &numeric, floor));
        }
    }

    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    module.visit("", &mut |n, p| {
        if p.is_trainable() {
            groups.push((n.to_string(), p.grad.data().to_vec()));
        }
    });
    for (name, analytic) in groups {
        let picks: Vec<usize> = match coords {
            None => (0..analytic.len()).collect(),
            Some(k) => {
                let largest = (0..analytic.len()).max_by(|&a, &b| analytic[a].abs().total_cmp(&analytic[b].abs())).unwrap_or(0);
                let mut picks = vec![largest];
                picks.extend((1..k.min(analytic.len())).map(|_| rng.random_range(0..analytic.len())));
                picks
            }
        };
        let mut numeric = Vec::with_capacity(picks.len());
        for &j in &picks {
            let set = |m: &mut M, value: Option<f64>| -> f64 {
                let mut previous = 0.0;
                m.visit_mut("", &mut |n, p| {
                    if n == name {
                        previous = p.value.data()[j];
                        if let Some(v) = value {
                            p.value.data_mut()[j] = v;
                        }
                    }
                });
                previous
            };
            let orig = set(module, None);
            numeric.push(derivative(steps, |d| {
                set(module, Some(orig + d));
                let v = loss(module, inputs);
                set(module, Some(orig));
                v
            }));
        }
        let sampled: Vec<f64> = picks.iter().map(|&j| analytic[j]).collect();
        report.record(&name, rel_err(&sampled, &numeric, floor));
    }
    report
}
