use std::sync::Arc;

use nerfcodec_autodiff::{Real, Tensor};

/// Scalar type a model forward pass can run in.
///
/// Parameters are stored in `f32`; the `f64` instantiation exists so that
/// gradient checks can run the production forward code at high precision.
pub trait Precision: Lower {
    fn lift(p: &Arc<Tensor<f32>>) -> Arc<Tensor<Self>>;
    fn lift_owned(t: Tensor<f32>) -> Tensor<Self>;
}

impl Precision for f32 {
    fn lift(p: &Arc<Tensor<f32>>) -> Arc<Tensor<f32>> {
        p.clone()
    }
    fn lift_owned(t: Tensor<f32>) -> Tensor<f32> {
        t
    }
}

impl Precision for f64 {
    fn lift(p: &Arc<Tensor<f32>>) -> Arc<Tensor<f64>> {
        Arc::new(p.cast())
    }
    fn lift_owned(t: Tensor<f32>) -> Tensor<f64> {
        t.cast()
    }
}

pub trait Lower: Real {
    fn lower(t: Tensor<Self>) -> Tensor<f32>;
}

impl Lower for f32 {
    fn lower(t: Tensor<f32>) -> Tensor<f32> {
        t
    }
}

impl Lower for f64 {
    fn lower(t: Tensor<f64>) -> Tensor<f32> {
        t.cast()
    }
}
