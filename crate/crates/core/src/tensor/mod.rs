//! Dense tensors, a reverse-mode tape, finite-difference gradient checking
//! and the binary weight checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod tape;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub use gradcheck::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport};
pub use tape::{sigmoid, Tape, Var};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// Row-major N-dimensional array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n], requires_grad: false, grad: None }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n], requires_grad: false, grad: None }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect(), requires_grad: false, grad: None }
    }

    /// Samples from N(0, std²).
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
    }

    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.gen_range(lo..hi)))
    }

    /// Mark as a trainable leaf.
    pub fn requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn is_trainable(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Add `g` into the gradient buffer.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect(), requires_grad: self.requires_grad, grad: None }
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// A structured collection of named tensors (model weights).
///
/// Names are dotted paths built from `prefix`; the same names are used when
/// binding the tensors to a [`Tape`] with [`Tape::param`].
pub trait Parameters<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn named(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    fn num_values(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_mut("", &mut |_, t| t.zero_grad());
    }

    /// Pull the gradients computed on `tape` into the tensors' buffers.
    fn collect_grads(&mut self, prefix: &str, tape: &Tape<T>) {
        self.visit_mut(prefix, &mut |name, t| {
            if let Some(g) = tape.param_grad(name) {
                t.accumulate_grad(g);
            }
        });
    }
}

/// Join a prefix and a field name with a dot.
pub fn child(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Implement [`Parameters`] for a struct whose listed fields are tensors,
/// named after the fields.
#[macro_export]
macro_rules! impl_parameters {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl<T: $crate::Scalar> $crate::tensor::Parameters<T> for $ty<T> {
            fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &$crate::tensor::Tensor<T>)) {
                $( f(&$crate::tensor::child(prefix, stringify!($field)), &self.$field); )*
            }
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut $crate::tensor::Tensor<T>)) {
                $( f(&$crate::tensor::child(prefix, stringify!($field)), &mut self.$field); )*
            }
        }
    };
}
