//! Layers with explicit forward and backward passes.
//!
//! Every layer caches what its backward pass needs during a
//! [`Mode::Train`] forward. Gradients accumulate into [`Param::grad`] until
//! [`Module::zero_grad`] clears them.

mod activation;
mod conv;
pub(crate) mod init;
mod linear;
mod norm;
mod pool;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

pub use activation::{relu_backward, relu_inplace, sigmoid, sigmoid_inplace, softmax_backward, softmax_rows};
pub use conv::{Conv2d, ConvTranspose2d};
pub use init::{rng_from_seed, InitRng};
pub use linear::Linear;
pub use norm::BatchNorm;
pub use pool::{global_avg_pool, global_avg_pool_backward, AvgPool2, MaxPool3x3};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Whether a forward pass records state for a backward pass.
///
/// `Train` also makes batch normalization use batch statistics and update
/// its running averages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    #[inline]
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Persistent state such as running statistics. Saved, never optimized.
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub kind: ParamKind,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            value,
            grad,
            kind: ParamKind::Trainable,
        }
    }

    pub fn buffer(value: Tensor<T>) -> Self {
        Param {
            kind: ParamKind::Buffer,
            ..Param::new(value)
        }
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn is_trainable(&self) -> bool {
        self.kind == ParamKind::Trainable
    }
}

/// Hierarchically named parameter container.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>));

    /// Number of trainable scalars.
    fn num_parameters(&self) -> usize {
        let mut total = 0;
        self.visit("", &mut |_, p| {
            if p.is_trainable() {
                total += p.value.shape().numel();
            }
        });
        total
    }

    fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, _| names.push(String::from(name)));
        names
    }

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, p| p.grad.fill(T::zero()));
    }

    /// Copy values (parameters and buffers) from a module of the same
    /// architecture, converting precision if needed.
    fn load_values_from<U: Scalar, M: Module<U>>(&mut self, other: &M) -> Result<()>
    where
        Self: Sized,
    {
        let mut values = Vec::new();
        other.visit("", &mut |name, p| values.push((String::from(name), p.value.cast::<T>())));
        let mut iter = values.into_iter();
        let mut failure = None;
        self.visit_mut("", &mut |name, p| {
            if failure.is_some() {
                return;
            }
            match iter.next() {
                Some((other_name, v)) if other_name == name && v.shape() == p.shape() => p.value = v,
                _ => failure = Some(String::from(name)),
            }
        });
        if let Some(name) = failure {
            return Err(Error::invalid(format!("parameter layout differs at {name}")));
        }
        if iter.next().is_some() {
            return Err(Error::invalid("source module has extra parameters"));
        }
        Ok(())
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        String::from(name)
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Scalar> Module<T> for Param<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(prefix, self)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(prefix, self)
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Option<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        if let Some(m) = self {
            m.visit(prefix, f)
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        if let Some(m) = self {
            m.visit_mut(prefix, f)
        }
    }
}

impl<T: Scalar, M: Module<T>> Module<T> for Vec<M> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &format!("{i}")), f)
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &format!("{i}")), f)
        }
    }
}

/// Implements [`Module`] by visiting the listed fields under their own names.
#[macro_export]
macro_rules! module_fields {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::Scalar> $crate::nn::Module<T> for $ty<T> {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &$crate::nn::Param<T>)) {
                $( $crate::nn::Module::visit(&self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }

            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut $crate::nn::Param<T>)) {
                $( $crate::nn::Module::visit_mut(&mut self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}

pub(crate) fn missing_cache(layer: &'static str) -> Error {
    Error::InvalidArgument(format!("{layer}: backward without a recorded training forward pass"))
}
