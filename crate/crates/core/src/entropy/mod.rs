//! Learned factorized density, rate term, integer quantization, range coding
//! and the bitstream container.

mod bitstream;
mod coder;

pub use bitstream::{megabytes, pack_indices, unpack_indices, Bitstream, Header, SizeReport, StreamInfo, MAGIC, VERSION};
pub use coder::{decode_stream, encode_stream, FreqTable, RangeDecoder, RangeEncoder, MAX_SUPPORT, PROB_BITS, TOTAL_FREQ};

use nerfcodec_autodiff::{Tensor, Var};

use crate::error::{CodecError, Result};
use crate::param::{Graph, LrGroup, Module, Param};
use crate::precision::Precision;

/// Hidden widths of the cumulative network.
pub const FILTERS: [usize; 3] = [3, 3, 3];
/// Initial spread of the learned density.
pub const INIT_SCALE: f64 = 10.0;
/// Added to every likelihood before taking the logarithm.
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;

fn dims() -> Vec<usize> {
    let mut d = vec![1];
    d.extend(FILTERS);
    d.push(1);
    d
}

/// Monotone cumulative `c(x) = sigmoid(f(x))` built from positive-weight
/// layers with `tanh` gates, and the unit-bin mass `c(x + ½) − c(x − ½)`.
#[derive(Clone, Debug)]
pub struct DensityModel {
    /// Unconstrained weights; the layer uses `softplus` of these.
    pub matrices: Vec<Param>,
    pub biases: Vec<Param>,
    /// Gate strengths, passed through `tanh`; none on the last layer.
    pub factors: Vec<Param>,
}

impl DensityModel {
    /// Odd cumulative logit at initialization, so the mass is symmetric
    /// about zero.
    pub fn new(name: &str) -> Self {
        let d = dims();
        let n = d.len() - 1;
        let scale = INIT_SCALE.powf(1.0 / n as f64);
        let mut matrices = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut factors = Vec::with_capacity(n - 1);
        for i in 0..n {
            let init = (1.0 / scale / d[i + 1] as f64).exp_m1().ln() as f32;
            matrices.push(Param::new(format!("{name}.matrix.{i}"), Tensor::full([d[i + 1], d[i]], init), LrGroup::Field));
            biases.push(Param::new(format!("{name}.bias.{i}"), Tensor::zeros([d[i + 1]]), LrGroup::Field));
            if i + 1 < n {
                factors.push(Param::new(format!("{name}.factor.{i}"), Tensor::zeros([d[i + 1]]), LrGroup::Field));
            }
        }
        Self {
            matrices,
            biases,
            factors,
        }
    }

    pub fn param_len() -> usize {
        let d = dims();
        let n = d.len() - 1;
        (0..n).map(|i| d[i] * d[i + 1] + d[i + 1]).sum::<usize>() + d[1..n].iter().sum::<usize>()
    }

    /// Flattened parameters: matrices, biases, factors in layer order.
    pub fn to_vec(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(Self::param_len());
        for p in self.matrices.iter().chain(&self.biases).chain(&self.factors) {
            out.extend_from_slice(p.value().data());
        }
        out
    }

    pub fn from_vec(name: &str, v: &[f32]) -> Result<Self> {
        if v.len() != Self::param_len() {
            return Err(CodecError::Shape(format!(
                "{} density parameters, expected {}",
                v.len(),
                Self::param_len()
            )));
        }
        let mut m = Self::new(name);
        let mut pos = 0;
        m.visit_mut(&mut |p| {
            let n = p.len();
            let t = Tensor::new(p.shape().to_vec(), v[pos..pos + n].to_vec()).expect("sized");
            p.set(t).expect("same shape");
            pos += n;
        });
        Ok(m)
    }

    /// Cumulative logit `f(x)` in double precision with portable math.
    pub fn logit(&self, x: f64) -> f64 {
        let mut h = vec![x];
        for (i, (m, b)) in self.matrices.iter().zip(&self.biases).enumerate() {
            let (o, n) = (m.shape()[0], m.shape()[1]);
            let w = m.value().data();
            let mut next: Vec<f64> = (0..o)
                .map(|r| {
                    let s: f64 = (0..n).map(|c| softplus64(w[r * n + c] as f64) * h[c]).sum();
                    s + b.value().data()[r] as f64
                })
                .collect();
            if let Some(f) = self.factors.get(i) {
                for (y, &a) in next.iter_mut().zip(f.value().data()) {
                    *y += libm::tanh(a as f64) * libm::tanh(*y);
                }
            }
            h = next;
        }
        h[0]
    }

    /// Mass of the unit bin centred on `x`.
    pub fn mass(&self, x: f64) -> f64 {
        let lo = self.logit(x - 0.5);
        let hi = self.logit(x + 0.5);
        let s = if lo + hi > 0.0 { -1.0 } else { 1.0 };
        (sigmoid64(s * hi) - sigmoid64(s * lo)).abs()
    }

    /// Bits `Σ −log2(mass(x) + floor)` of `values` `[n, 1]` on the graph.
    pub fn bits<T: Precision>(&self, g: &mut Graph<'_, T>, values: Var) -> Result<Var> {
        let half = T::from_f64(0.5);
        let lo = g.tape.affine(values, T::one(), -half)?;
        let hi = g.tape.affine(values, T::one(), half)?;
        let lo = self.logit_graph(g, lo)?;
        let hi = self.logit_graph(g, hi)?;
        let sum = g.tape.add(lo, hi)?;
        let sign = g.tape.value(sum).map(|v| if v > T::zero() { -T::one() } else { T::one() });
        let sign = g.tape.constant(sign);
        let lo = g.tape.mul(lo, sign)?;
        let hi = g.tape.mul(hi, sign)?;
        let lo = g.tape.sigmoid(lo)?;
        let hi = g.tape.sigmoid(hi)?;
        let d = g.tape.sub(hi, lo)?;
        let abs = g.tape.value(d).map(|v| if v < T::zero() { -T::one() } else { T::one() });
        let abs = g.tape.constant(abs);
        let p = g.tape.mul(d, abs)?;
        let p = g.tape.affine(p, T::one(), T::from_f64(LIKELIHOOD_FLOOR))?;
        let lg = g.tape.log(p)?;
        let total = g.tape.sum(lg)?;
        Ok(g.tape.scale(total, -T::one() / T::from_f64(std::f64::consts::LN_2))?)
    }

    fn logit_graph<T: Precision>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = g.tape.shape(x)[0];
        let mut h = x;
        for (i, (m, b)) in self.matrices.iter().zip(&self.biases).enumerate() {
            let o = m.shape()[0];
            let w = g.param(m);
            let w = g.tape.softplus(w)?;
            let y = g.tape.matmul_t(h, w, false, true)?;
            let bv = g.param(b);
            let bv = g.tape.reshape(bv, &[1, o])?;
            let bv = g.tape.broadcast_to(bv, &[n, o])?;
            h = g.tape.add(y, bv)?;
            if let Some(f) = self.factors.get(i) {
                let a = g.param(f);
                let a = g.tape.tanh(a)?;
                let a = g.tape.reshape(a, &[1, o])?;
                let a = g.tape.broadcast_to(a, &[n, o])?;
                let t = g.tape.tanh(h)?;
                let gated = g.tape.mul(a, t)?;
                h = g.tape.add(h, gated)?;
            }
        }
        Ok(h)
    }

    /// Integer frequency table over `[min, max]`.
    pub fn table(&self, min: i32, max: i32) -> Result<FreqTable> {
        let masses: Vec<f64> = (min..=max).map(|x| self.mass(x as f64)).collect();
        FreqTable::from_masses(&masses)
    }
}

impl Module for DensityModel {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.matrices.visit(f);
        self.biases.visit(f);
        self.factors.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.matrices.visit_mut(f);
        self.biases.visit_mut(f);
        self.factors.visit_mut(f);
    }
}

fn softplus64(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        libm::log1p(libm::exp(x))
    }
}

fn sigmoid64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// One density model per delta matrix stream.
pub fn stream_models(n: usize) -> Vec<DensityModel> {
    (0..n).map(|i| DensityModel::new(&format!("entropy.{i}"))).collect()
}

/// Total bits of `matrices` (each `[1, V, V]`, already carrying any noise)
/// under their per-stream models.
pub fn rate_bits<T: Precision>(g: &mut Graph<'_, T>, models: &[DensityModel], matrices: &[Var]) -> Result<Var> {
    if models.len() != matrices.len() {
        return Err(CodecError::Shape(format!("{} models for {} streams", models.len(), matrices.len())));
    }
    let mut total: Option<Var> = None;
    for (m, &x) in models.iter().zip(matrices) {
        let n = g.tape.value(x).len();
        let col = g.tape.reshape(x, &[n, 1])?;
        let b = m.bits(g, col)?;
        total = Some(match total {
            Some(t) => g.tape.add(t, b)?,
            None => b,
        });
    }
    total.ok_or_else(|| CodecError::Shape("no streams".into()))
}

/// Round half to even, elementwise, with the `(min, max)` of the result.
pub fn quantize_round(values: &[f32]) -> (Vec<i32>, i32, i32) {
    let q: Vec<i32> = values.iter().map(|v| v.round_ties_even() as i32).collect();
    let min = q.iter().copied().min().unwrap_or(0);
    let max = q.iter().copied().max().unwrap_or(0);
    (q, min, max)
}

/// Ideal code length in bits of `symbols` under a frequency table.
pub fn ideal_bits(table: &FreqTable, symbols: &[i32], min: i32) -> f64 {
    symbols
        .iter()
        .map(|&s| {
            let f = table.freq((s - min) as usize) as f64;
            -(f / TOTAL_FREQ as f64).log2()
        })
        .sum()
}
