//! Finite-difference gradient oracle for unit tests.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{Mode, Module};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub fn random_tensor<T: Scalar>(shape: Shape, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| T::from_f64_lossy(rng.random_range(-1.0..1.0)))
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Checks analytic gradients of `sum(weights ⊙ forward(inputs))` against
/// central differences for every input and every trainable parameter.
pub fn assert_multi_grads_match<M, F, B>(mut module: M, inputs: &[Tensor<f64>], mut forward: F, mut backward: B, tol: f64)
where
    M: Module<f64>,
    F: FnMut(&mut M, &[Tensor<f64>], Mode) -> Result<Tensor<f64>>,
    B: FnMut(&mut M, &Tensor<f64>) -> Result<Vec<Tensor<f64>>>,
{
    let h = 1e-5;
    let y = forward(&mut module, inputs, Mode::Train).unwrap();
    let weights: Tensor<f64> = random_tensor(y.shape(), 77);
    module.zero_grad();
    let input_grads = backward(&mut module, &weights).unwrap();
    let mut loss = |m: &mut M, xs: &[Tensor<f64>]| -> f64 {
        let y = forward(m, xs, Mode::Train).unwrap();
        y.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    for (i, x) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(x.data().len());
        let mut xs = inputs.to_vec();
        for j in 0..x.data().len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + h;
            let up = loss(&mut module, &xs);
            xs[i].data_mut()[j] = orig - h;
            let down = loss(&mut module, &xs);
            xs[i].data_mut()[j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        let err = rel_err(input_grads[i].data(), &numeric);
        assert!(err < tol, "input {i}: relative error {err}");
    }

    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    module.visit("", &mut |name, p| {
        if p.is_trainable() {
            groups.push((String::from(name), p.grad.data().to_vec()));
        }
    });
    for (name, analytic) in groups {
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..analytic.len() {
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
            let orig = set(&mut module, None);
            set(&mut module, Some(orig + h));
            let up = loss(&mut module, inputs);
            set(&mut module, Some(orig - h));
            let down = loss(&mut module, inputs);
            set(&mut module, Some(orig));
            numeric.push((up - down) / (2.0 * h));
        }
        let err = rel_err(&analytic, &numeric);
        assert!(err < tol, "parameter {name}: relative error {err}");
    }
}

pub fn assert_grads_match<M, F, B>(module: M, x: &Tensor<f64>, mut forward: F, mut backward: B, tol: f64)
where
    M: Module<f64>,
    F: FnMut(&mut M, &Tensor<f64>, Mode) -> Result<Tensor<f64>>,
    B: FnMut(&mut M, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    assert_multi_grads_match(
        module,
        core::slice::from_ref(x),
        |m, xs, mode| forward(m, &xs[0], mode),
        |m, dy| backward(m, dy).map(|g| alloc::vec![g]),
        tol,
    )
}
