//! Decoder MLPs and two-pass volume rendering.

mod mlp;

use nerfcodec_autodiff::{Real, Tape, Tensor, Var};
use rand::Rng;
use rayon::prelude::*;

pub use mlp::{positional_encode, AdapterParams, DenseParams, Linear, Lora, RadianceMlp, ADAPTER_INIT_STD};

use crate::error::{CodecError, Result};
use crate::param::{Graph, Module, Param, Trainable};
use crate::precision::Precision;
use crate::profile::Profile;
use crate::rng::{self, tag};
use crate::scene::{CameraView, Image, Ray};
use crate::peft::DeltaFactors;
use crate::triplane::{sample_features, FieldVars, Triplanes};

/// Weight added to every coarse interval before importance sampling.
pub const PDF_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub background: [f32; 3],
    pub pe_freqs: usize,
    /// Jittered strata and random importance draws; off gives midpoints and
    /// evenly spaced quantiles.
    pub perturb: bool,
    pub seed: u64,
}

impl RenderConfig {
    pub fn for_profile(p: &Profile, background: [f32; 3]) -> Self {
        Self {
            n_coarse: p.n_coarse,
            n_fine: p.n_fine,
            background,
            pe_freqs: p.pe_freqs,
            perturb: false,
            seed: 0,
        }
    }
}

/// Coarse and fine decoders with identical architecture.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub coarse: RadianceMlp,
    pub fine: RadianceMlp,
}

impl Decoder {
    pub fn new(profile: &Profile, seed: u64) -> Self {
        Self {
            coarse: RadianceMlp::new(profile, "decoder.coarse", seed),
            fine: RadianceMlp::new(profile, "decoder.fine", seed),
        }
    }

    pub fn wrap(&mut self, rank: usize, seed: u64) {
        self.coarse.wrap(rank, seed);
        self.fine.wrap(rank, seed ^ 1);
    }

    pub fn pe_freqs(&self) -> usize {
        self.coarse.pe_freqs
    }
}

impl Module for Decoder {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.coarse.visit(f);
        self.fine.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.coarse.visit_mut(f);
        self.fine.visit_mut(f);
    }
}

/// Anything that maps sample points and view directions to density `[n, 1]`
/// and color `[n, 3]` on a graph.
pub trait RadianceField<T: Precision> {
    fn query(&self, g: &mut Graph<'_, T>, points: &[[T; 3]], dirs: &[[f64; 3]], fine: bool) -> Result<(Var, Var)>;
}

/// A decoder together with triplanes already bound on the graph.
pub struct BoundScene<'a> {
    pub decoder: &'a Decoder,
    pub field: FieldVars,
}

impl<T: Precision> RadianceField<T> for BoundScene<'_> {
    fn query(&self, g: &mut Graph<'_, T>, points: &[[T; 3]], dirs: &[[f64; 3]], fine: bool) -> Result<(Var, Var)> {
        let n = points.len();
        let feats = sample_features(&mut g.tape, &self.field, points)?;
        let p = g.constant(Tensor::new([n, 3], points.iter().flatten().copied().collect())?);
        let l = self.decoder.pe_freqs();
        let pe: Vec<T> = dirs.iter().flat_map(|d| positional_encode(*d, l)).map(T::from_f64).collect();
        let pe = g.constant(Tensor::new([n, 3 + 6 * l], pe)?);
        let mlp = if fine { &self.decoder.fine } else { &self.decoder.coarse };
        mlp.forward(g, feats, p, pe)
    }
}

/// Per-ray samples and their interval lengths.
struct Samples {
    t: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
    bounds: Vec<Vec<f64>>,
}

/// Interval boundaries at sample midpoints, clipped to `[t0, t1]`, so the
/// lengths sum to `t1 − t0`.
pub fn interval_bounds(t: &[f64], t0: f64, t1: f64) -> Vec<f64> {
    let mut b = Vec::with_capacity(t.len() + 1);
    b.push(t0);
    for w in t.windows(2) {
        b.push(0.5 * (w[0] + w[1]));
    }
    b.push(t1);
    b
}

fn make_samples(ts: Vec<Vec<f64>>, spans: &[(f64, f64)]) -> Samples {
    let bounds: Vec<Vec<f64>> = ts.iter().zip(spans).map(|(t, &(a, b))| interval_bounds(t, a, b)).collect();
    let delta = bounds.iter().map(|b| b.windows(2).map(|w| w[1] - w[0]).collect()).collect();
    Samples { t: ts, delta, bounds }
}

/// Inverse-CDF draws from the piecewise-constant density with mass
/// `weights[i] + PDF_FLOOR` on `[bounds[i], bounds[i + 1]]`.
pub fn sample_pdf(bounds: &[f64], weights: &[f64], us: &[f64]) -> Vec<f64> {
    let w: Vec<f64> = weights.iter().map(|&w| w.max(0.0) + PDF_FLOOR).collect();
    let total: f64 = w.iter().sum();
    let mut cdf = Vec::with_capacity(w.len() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for x in &w {
        acc += x / total;
        cdf.push(acc);
    }
    us.iter()
        .map(|&u| {
            let u = u.clamp(0.0, 1.0);
            let i = cdf[1..].partition_point(|&c| c <= u).min(w.len() - 1);
            let width = cdf[i + 1] - cdf[i];
            let f = if width > 0.0 { ((u - cdf[i]) / width).clamp(0.0, 1.0) } else { 0.5 };
            bounds[i] + f * (bounds[i + 1] - bounds[i])
        })
        .collect()
}

/// Alpha compositing of `sigma [b·s, 1]` and `rgb [b·s, 3]` with interval
/// lengths `delta` over a constant background. Returns color `[b, 3]` and
/// weights `[b, s]`.
pub fn composite<T: Precision>(
    tape: &mut Tape<T>,
    sigma: Var,
    rgb: Var,
    delta: &[f64],
    rays: usize,
    samples: usize,
    background: [f32; 3],
) -> Result<(Var, Var)> {
    let sigma = tape.reshape(sigma, &[rays, samples])?;
    let d = tape.constant(Tensor::new([rays, samples], delta.iter().map(|&x| T::from_f64(x)).collect())?);
    let sd = tape.mul(sigma, d)?;
    let neg = tape.neg(sd)?;
    let e = tape.exp(neg)?;
    let alpha = tape.affine(e, -T::one(), T::one())?;
    let optical = tape.cumsum_exclusive(sd)?;
    let optical = tape.neg(optical)?;
    let trans = tape.exp(optical)?;
    let w = tape.mul(trans, alpha)?;
    let w3 = tape.reshape(w, &[rays, samples, 1])?;
    let w3 = tape.broadcast_to(w3, &[rays, samples, 3])?;
    let c = tape.reshape(rgb, &[rays, samples, 3])?;
    let wc = tape.mul(w3, c)?;
    let col = tape.sum_axis(wc, 1)?;
    let col = tape.reshape(col, &[rays, 3])?;
    let acc = tape.sum_axis(w, 1)?;
    let resid = tape.affine(acc, -T::one(), T::one())?;
    let resid = tape.broadcast_to(resid, &[rays, 3])?;
    let bg = tape.constant(Tensor::from_fn([rays, 3], |i| T::from_f32(background[i % 3])));
    let bg = tape.mul(resid, bg)?;
    Ok((tape.add(col, bg)?, w))
}

/// Output of [`render_rays`].
pub struct RayBatch {
    pub coarse: Var,
    pub fine: Var,
    /// Fine-pass compositing weights `[b, n_coarse + n_fine]`.
    pub weights: Var,
    /// Sorted fine-pass sample distances per ray.
    pub fine_t: Vec<Vec<f64>>,
}

/// Two-pass hierarchical rendering of a batch of rays. `keys` name the
/// per-ray random streams (used only when `cfg.perturb` is set).
pub fn render_rays<T: Precision, F: RadianceField<T>>(
    g: &mut Graph<'_, T>,
    field: &F,
    rays: &[Ray],
    keys: &[u64],
    cfg: &RenderConfig,
) -> Result<RayBatch> {
    let b = rays.len();
    let (nc, nf) = (cfg.n_coarse, cfg.n_fine);
    let spans: Vec<(f64, f64)> = rays.iter().map(|r| r.clip_to_cube().unwrap_or((r.near, r.near))).collect();
    let mut rngs: Vec<_> = keys.iter().map(|&k| rng::stream(cfg.seed, &[tag::JITTER, k])).collect();
    let coarse_t: Vec<Vec<f64>> = spans
        .iter()
        .enumerate()
        .map(|(i, &(t0, t1))| {
            (0..nc)
                .map(|j| {
                    let u = if cfg.perturb { rngs[i].random::<f64>() } else { 0.5 };
                    t0 + (j as f64 + u) / nc as f64 * (t1 - t0)
                })
                .collect()
        })
        .collect();
    let coarse = make_samples(coarse_t, &spans);
    let (c_rgb, c_w) = pass(g, field, rays, &coarse, cfg, false)?;

    let wv = g.value(c_w).clone();
    let mut merged = Vec::with_capacity(b);
    for i in 0..b {
        let w: Vec<f64> = wv.data()[i * nc..(i + 1) * nc].iter().map(|x| Real::to_f64(*x)).collect();
        let us: Vec<f64> = if cfg.perturb {
            (0..nf).map(|_| rngs[i].random::<f64>()).collect()
        } else {
            (0..nf).map(|j| (j as f64 + 0.5) / nf as f64).collect()
        };
        let mut t = sample_pdf(&coarse.bounds[i], &w, &us);
        t.extend_from_slice(&coarse.t[i]);
        t.sort_by(f64::total_cmp);
        merged.push(t);
    }
    let fine = make_samples(merged, &spans);
    let (f_rgb, f_w) = pass(g, field, rays, &fine, cfg, true)?;
    Ok(RayBatch {
        coarse: c_rgb,
        fine: f_rgb,
        weights: f_w,
        fine_t: fine.t,
    })
}

/// One pass at given sorted sample distances, as color `[b, 3]` and
/// weights `[b, s]`. Every ray needs the same number of samples.
pub fn render_at<T: Precision, F: RadianceField<T>>(
    g: &mut Graph<'_, T>,
    field: &F,
    rays: &[Ray],
    t: Vec<Vec<f64>>,
    cfg: &RenderConfig,
    fine: bool,
) -> Result<(Var, Var)> {
    let per = t.first().map_or(0, Vec::len);
    if t.len() != rays.len() || per == 0 || t.iter().any(|ts| ts.len() != per) {
        return Err(CodecError::Shape(format!("{} sample lists for {} rays", t.len(), rays.len())));
    }
    let spans: Vec<(f64, f64)> = rays.iter().map(|r| r.clip_to_cube().unwrap_or((r.near, r.near))).collect();
    pass(g, field, rays, &make_samples(t, &spans), cfg, fine)
}

fn pass<T: Precision, F: RadianceField<T>>(
    g: &mut Graph<'_, T>,
    field: &F,
    rays: &[Ray],
    s: &Samples,
    cfg: &RenderConfig,
    fine: bool,
) -> Result<(Var, Var)> {
    let per = s.t[0].len();
    let mut points = Vec::with_capacity(rays.len() * per);
    let mut dirs = Vec::with_capacity(rays.len() * per);
    for (r, ts) in rays.iter().zip(&s.t) {
        for &t in ts {
            points.push(r.at(t).map(T::from_f64));
            dirs.push(r.dir);
        }
    }
    let (sigma, rgb) = field.query(g, &points, &dirs, fine)?;
    let delta: Vec<f64> = s.delta.iter().flatten().copied().collect();
    composite(&mut g.tape, sigma, rgb, &delta, rays.len(), per, cfg.background)
}

/// Rays per independent tape when rendering or training.
pub const CHUNK: usize = 256;

/// What gets rendered: triplanes, an optional factorized delta and a decoder.
#[derive(Clone, Debug)]
pub struct SceneModel {
    pub planes: Triplanes,
    pub delta: Option<DeltaFactors>,
    pub decoder: Decoder,
}

impl SceneModel {
    /// Binds the representation; `noise` is added to the delta matrices
    /// (one tensor per matrix) as a quantization proxy.
    pub fn bind<T: Precision>(&self, g: &mut Graph<'_, T>, noise: Option<&[Tensor]>) -> Result<BoundScene<'_>> {
        let mut field = self.planes.bind(g);
        if let Some(d) = &self.delta {
            field.delta = Some(d.bind(g, noise)?);
        }
        Ok(BoundScene {
            decoder: &self.decoder,
            field,
        })
    }
}

impl Module for SceneModel {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.planes.visit(f);
        self.delta.visit(f);
        self.decoder.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.planes.visit_mut(f);
        self.delta.visit_mut(f);
        self.decoder.visit_mut(f);
    }
}

/// Renders every pixel of `view` through the fine pass, with per-pixel
/// accumulated opacity as alpha.
pub fn render_image(view: &CameraView, near: f64, far: f64, scene: &SceneModel, cfg: &RenderConfig) -> Result<Image> {
    let rays = view.generate_rays(near, far);
    let none = Trainable::none();
    let chunks: Vec<Result<(Vec<f32>, Vec<f32>)>> = crate::pool().install(|| {
        rays.par_chunks(CHUNK)
            .enumerate()
            .map(|(ci, chunk)| {
                let mut g = Graph::<f32>::new(&none);
                let keys: Vec<u64> = (0..chunk.len()).map(|i| (ci * CHUNK + i) as u64).collect();
                let bound = scene.bind(&mut g, None)?;
                let out = render_rays(&mut g, &bound, chunk, &keys, cfg)?;
                let rgb = g.value(out.fine).data().to_vec();
                let w = g.value(out.weights);
                let per = w.shape()[1];
                let acc = w.data().chunks(per).map(|c| c.iter().sum()).collect();
                Ok((rgb, acc))
            })
            .collect()
    });
    let mut rgb = Vec::with_capacity(rays.len() * 3);
    let mut alpha = Vec::with_capacity(rays.len());
    for c in chunks {
        let (r, a) = c?;
        rgb.extend(r);
        alpha.extend(a);
    }
    Ok(Image {
        width: view.width(),
        height: view.height(),
        rgb,
        alpha: Some(alpha),
    })
}
