//! Central finite differences for checking analytic gradients.

use crate::real::Real;
use crate::tensor::Tensor;

/// Numerical gradient of the scalar function `f` at `x` by central
/// differences with step `h`.
pub fn gradient<T: Real>(x: &Tensor<T>, h: T, mut f: impl FnMut(&Tensor<T>) -> T) -> Tensor<T> {
    let mut probe = x.clone();
    let two_h = h + h;
    Tensor::from_fn(x.shape().to_vec(), |i| {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        (up - down) / two_h
    })
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)` in the Euclidean norm.
pub fn rel_error<T: Real>(a: &Tensor<T>, b: &Tensor<T>, floor: f64) -> f64 {
    let norm = |t: &Tensor<T>| t.data().iter().map(|v| Real::to_f64(*v).powi(2)).sum::<f64>().sqrt();
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (Real::to_f64(*p) - Real::to_f64(*q)).powi(2))
        .sum::<f64>()
        .sqrt();
    diff / norm(a).max(norm(b)).max(floor)
}
