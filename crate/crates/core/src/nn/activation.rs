use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient through a ReLU given its output.
pub fn relu_backward<T: Scalar>(dy: &mut Tensor<T>, y: &Tensor<T>) {
    for (g, &o) in dy.data_mut().iter_mut().zip(y.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn sigmoid_inplace<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        *v = sigmoid(*v);
    }
}

/// In-place softmax over each contiguous row of `width` elements.
pub fn softmax_rows<T: Scalar>(data: &mut [T], width: usize) {
    for row in data.chunks_mut(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Gradient with respect to softmax logits for one row.
pub fn softmax_backward<T: Scalar>(probs: &[T], grad_out: &[T], grad_in: &mut [T]) {
    let dot: T = probs.iter().zip(grad_out).map(|(&p, &g)| p * g).sum();
    for ((gi, &p), &g) in grad_in.iter_mut().zip(probs).zip(grad_out) {
        *gi = p * (g - dot);
    }
}
