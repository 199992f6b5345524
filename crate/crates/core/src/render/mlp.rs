use nerfcodec_autodiff::{Tensor, Var};
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::param::{Graph, LrGroup, Module, Param};
use crate::precision::Precision;
use crate::profile::Profile;
use crate::rng::{self, tag};

/// Standard deviation of the random low-rank factor and of delta matrices.
pub const ADAPTER_INIT_STD: f32 = 0.02;

/// Low-rank additive update `up · down` of a frozen weight.
#[derive(Clone, Debug)]
pub struct Lora {
    /// `[out, rank]`, zero at initialization.
    pub up: Param,
    /// `[rank, in]`, random at initialization.
    pub down: Param,
}

/// Fully connected layer `y = x·Wᵀ + b`, optionally adapted.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub lora: Option<Lora>,
}

impl Linear {
    /// He-normal weights and zero bias.
    pub fn new(name: &str, d_in: usize, d_out: usize, seed: u64) -> Self {
        let normal = Normal::new(0.0, (2.0 / d_in as f32).sqrt()).expect("finite std");
        let mut r = rng::stream(seed, &[tag::INIT, rng::name_key(name)]);
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::from_fn([d_out, d_in], |_| normal.sample(&mut r)),
                LrGroup::Network,
            ),
            bias: Param::new(format!("{name}.bias"), Tensor::zeros([d_out]), LrGroup::Network),
            lora: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn attach_lora(&mut self, rank: usize, seed: u64) {
        let base = self.weight.name().trim_end_matches(".weight").to_string();
        let normal = Normal::new(0.0, ADAPTER_INIT_STD).expect("finite std");
        let mut r = rng::stream(seed, &[tag::INIT, rng::name_key(&base), 7]);
        self.lora = Some(Lora {
            up: Param::new(format!("{base}.lora_up"), Tensor::zeros([self.d_out(), rank]), LrGroup::Network),
            down: Param::new(
                format!("{base}.lora_down"),
                Tensor::from_fn([rank, self.d_in()], |_| normal.sample(&mut r)),
                LrGroup::Network,
            ),
        });
    }

    /// `x` is `[n, d_in]`; returns `[n, d_out]`.
    pub fn forward<T: Precision>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let n = g.tape.shape(x)[0];
        let w = g.param(&self.weight);
        let mut y = g.tape.matmul_t(x, w, false, true)?;
        if let Some(l) = &self.lora {
            let (up, down) = (g.param(&l.up), g.param(&l.down));
            let h = g.tape.matmul_t(x, down, false, true)?;
            let d = g.tape.matmul_t(h, up, false, true)?;
            y = g.tape.add(y, d)?;
        }
        let b = g.param(&self.bias);
        let b = g.tape.reshape(b, &[1, self.d_out()])?;
        let b = g.tape.broadcast_to(b, &[n, self.d_out()])?;
        Ok(g.tape.add(y, b)?)
    }

    /// Dense weight with the adapter folded in, `W + up·down`.
    pub fn effective_weight(&self) -> Tensor {
        let mut w = self.weight.value().clone();
        if let Some(l) = &self.lora {
            let (up, down) = (l.up.value(), l.down.value());
            let (o, r, i) = (up.shape()[0], up.shape()[1], down.shape()[1]);
            for a in 0..o {
                for b in 0..i {
                    let mut s = 0.0;
                    for k in 0..r {
                        s += up.data()[a * r + k] * down.data()[k * i + b];
                    }
                    w.data_mut()[a * i + b] += s;
                }
            }
        }
        w
    }
}

/// Dense parameters only (weights and biases).
pub struct DenseParams<'a>(pub &'a RadianceMlp);

/// Adapter factors only.
pub struct AdapterParams<'a>(pub &'a RadianceMlp);

impl Module for Linear {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
        if let Some(l) = &self.lora {
            f(&l.up);
            f(&l.down);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
        if let Some(l) = &mut self.lora {
            f(&mut l.up);
            f(&mut l.down);
        }
    }
}

/// Decoder from triplane features to density and view-dependent color.
///
/// The trunk sees the feature and the raw point; density branches off the
/// trunk before the encoded view direction is injected, so it cannot depend
/// on the view.
#[derive(Clone, Debug)]
pub struct RadianceMlp {
    pub trunk: Vec<Linear>,
    pub density: Linear,
    pub color_hidden: Linear,
    pub color_out: Linear,
    pub pe_freqs: usize,
}

impl RadianceMlp {
    /// `mlp_depth` counts the layers on the color path: `depth − 2` trunk
    /// layers, the color hidden layer and the color output.
    pub fn new(profile: &Profile, name: &str, seed: u64) -> Self {
        let h = profile.mlp_width;
        let d_in = profile.feature_dim() + 3;
        let mut trunk = vec![Linear::new(&format!("{name}.trunk.0"), d_in, h, seed)];
        for i in 1..profile.mlp_depth - 2 {
            trunk.push(Linear::new(&format!("{name}.trunk.{i}"), h, h, seed));
        }
        Self {
            trunk,
            density: Linear::new(&format!("{name}.density"), h, 1, seed),
            color_hidden: Linear::new(&format!("{name}.color.0"), h + profile.pe_dim(), h / 2, seed),
            color_out: Linear::new(&format!("{name}.color.1"), h / 2, 3, seed),
            pe_freqs: profile.pe_freqs,
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.trunk.iter().chain([&self.density, &self.color_hidden, &self.color_out])
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.trunk
            .iter_mut()
            .chain([&mut self.density, &mut self.color_hidden, &mut self.color_out])
    }

    /// Adds zero-initialized adapters of `rank` to every layer.
    pub fn wrap(&mut self, rank: usize, seed: u64) {
        for l in self.layers_mut() {
            l.attach_lora(rank, seed);
        }
    }

    pub fn is_wrapped(&self) -> bool {
        self.layers().all(|l| l.lora.is_some())
    }

    /// `Σ (d_in + d_out)` over layers; adapter scalars are this times the rank.
    pub fn adapter_width_sum(&self) -> usize {
        self.layers().map(|l| l.d_in() + l.d_out()).sum()
    }

    /// Density `[n, 1]` and color `[n, 3]` from features `[n, 3C]`, points
    /// `[n, 3]` and encoded directions `[n, 3 + 6L]`.
    pub fn forward<T: Precision>(&self, g: &mut Graph<'_, T>, features: Var, points: Var, dirs: Var) -> Result<(Var, Var)> {
        let mut h = g.tape.concat(&[features, points], 1)?;
        for l in &self.trunk {
            let z = l.forward(g, h)?;
            h = g.tape.relu(z)?;
        }
        let s = self.density.forward(g, h)?;
        let sigma = g.tape.softplus(s)?;
        let c = g.tape.concat(&[h, dirs], 1)?;
        let c = self.color_hidden.forward(g, c)?;
        let c = g.tape.relu(c)?;
        let c = self.color_out.forward(g, c)?;
        let rgb = g.tape.sigmoid(c)?;
        Ok((sigma, rgb))
    }
}

impl Module for RadianceMlp {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for l in self.layers() {
            l.visit(f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for l in self.layers_mut() {
            l.visit_mut(f);
        }
    }
}

impl Module for DenseParams<'_> {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for l in self.0.layers() {
            f(&l.weight);
            f(&l.bias);
        }
    }
    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut Param)) {
        unreachable!("read-only view")
    }
}

impl Module for AdapterParams<'_> {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for l in self.0.layers() {
            if let Some(a) = &l.lora {
                f(&a.up);
                f(&a.down);
            }
        }
    }
    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut Param)) {
        unreachable!("read-only view")
    }
}

/// `(d, sin(2^j π d), cos(2^j π d))` for `j < freqs`, length `3 + 6·freqs`.
pub fn positional_encode(d: [f64; 3], freqs: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * freqs);
    out.extend_from_slice(&d);
    for j in 0..freqs {
        let w = (1u64 << j) as f64 * std::f64::consts::PI;
        out.extend(d.iter().map(|x| (w * x).sin()));
        out.extend(d.iter().map(|x| (w * x).cos()));
    }
    out
}
