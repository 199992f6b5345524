//! Convolution layers shared by the encoder and the code path.

use nerfcodec_autodiff::{Tensor, Var};
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::param::{Graph, LrGroup, Module, Param};
use crate::precision::Precision;
use crate::rng::{self, tag};

/// Square (2D) or cubic (3D) convolution with bias and "same" padding.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: Param,
    pub bias: Param,
    pub stride: usize,
}

impl Conv {
    pub fn new2d(name: &str, cin: usize, cout: usize, k: usize, stride: usize, seed: u64) -> Self {
        Self::build(name, vec![cout, cin, k, k], stride, seed)
    }

    pub fn new3d(name: &str, cin: usize, cout: usize, k: usize, stride: usize, seed: u64) -> Self {
        Self::build(name, vec![cout, cin, k, k, k], stride, seed)
    }

    fn build(name: &str, shape: Vec<usize>, stride: usize, seed: u64) -> Self {
        let fan_in: usize = shape[1..].iter().product();
        let normal = Normal::new(0.0, (2.0 / fan_in as f32).sqrt()).expect("finite std");
        let mut r = rng::stream(seed, &[tag::INIT, rng::name_key(name)]);
        let cout = shape[0];
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::from_fn(shape, |_| normal.sample(&mut r)),
                LrGroup::Network,
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros([cout]), LrGroup::Network),
            stride,
        }
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward<T: Precision>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let b = g.param(&self.bias);
        let pad = self.kernel() / 2;
        Ok(if self.weight.shape().len() == 4 {
            g.tape.conv2d(x, w, Some(b), self.stride, pad)?
        } else {
            g.tape.conv3d(x, w, Some(b), self.stride, pad)?
        })
    }

    /// Zeroes weight and bias.
    pub fn zero(&mut self) {
        let w = Tensor::zeros(self.weight.shape().to_vec());
        let b = Tensor::zeros(self.bias.shape().to_vec());
        self.weight.set(w).expect("same shape");
        self.bias.set(b).expect("same shape");
    }
}

impl Module for Conv {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
