//! Minimal CPU layer library with explicit backward passes.
//!
//! Activations are 5D tensors laid out as `(batch, channel, z, y, x)`. Each
//! layer exposes a `forward` that returns its output together with whatever
//! it needs to run `backward`, and `backward` accumulates parameter gradients
//! into [`Param::grad`] and returns the gradient with respect to its input.

mod conv;
mod interp;
mod norm;
mod pool;
mod se;
mod units;

pub use conv::Conv3d;
pub use interp::{interp_axis, interp_axis_backward, nearest_indices, LinearTaps};
pub use norm::{GroupNorm, GroupNormCache};
pub use pool::{MaxPool, MaxPoolCache};
pub use se::{ResidualSe, ResidualSeCache};
pub use units::{
    concat_channels, split_channels, ConvUnit, ConvUnitCache, HdcUnit, ResSeUnit, ResSeUnitCache,
    Upsample,
};

use ndarray::Array5;
use rand::Rng;
use rand_distr::{Distribution, Normal};

pub type Tensor = Array5<f32>;

/// A trainable parameter with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub shape: Vec<usize>,
}

impl Param {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Param {
            value: vec![0.0; len],
            grad: vec![0.0; len],
            shape: shape.to_vec(),
        }
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        let mut p = Param::zeros(shape);
        p.value.iter_mut().for_each(|x| *x = v);
        p
    }

    /// He (fan-in) normal initialisation.
    pub fn he_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let mut p = Param::zeros(shape);
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for v in p.value.iter_mut() {
            *v = normal.sample(rng) as f32;
        }
        p
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything that owns parameters, visited in a fixed canonical order.
///
/// The visiting order defines the weight-file layout and the optimizer
/// state layout, so it must never depend on runtime values.
pub trait Parameterized {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }
}
