use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{CameraView, Image, Intrinsics, Pose, Ray, Role, Scene, Vec3};
use crate::error::{CodecError, Result};
use crate::rng::{self, tag};

/// Quadrature samples per ray for ground-truth renders.
pub const ORACLE_SAMPLES: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Sphere,
    Box,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Extent {
    Uniform(f64),
    PerAxis([f64; 3]),
}

impl Extent {
    fn axes(self) -> [f64; 3] {
        match self {
            Extent::Uniform(r) => [r; 3],
            Extent::PerAxis(a) => a,
        }
    }
}

/// A constant-density, constant-albedo solid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub kind: PrimitiveKind,
    pub center: [f64; 3],
    pub radius_or_halfextent: Extent,
    pub sigma: f64,
    pub rgb: [f32; 3],
}

impl Primitive {
    fn contains(&self, p: Vec3) -> bool {
        let e = self.radius_or_halfextent.axes();
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        match self.kind {
            PrimitiveKind::Sphere => d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= e[0] * e[0],
            PrimitiveKind::Box => (0..3).all(|a| d[a].abs() <= e[a]),
        }
    }

    fn validate(&self) -> Result<()> {
        let e = self.radius_or_halfextent.axes();
        if self.kind == PrimitiveKind::Sphere && (e[0] != e[1] || e[1] != e[2]) {
            return Err(CodecError::Scene("a sphere takes a single radius".into()));
        }
        if e.iter().any(|&x| !(x > 0.0)) || !(self.sigma >= 0.0) {
            return Err(CodecError::Scene("primitive extents must be positive and sigma non-negative".into()));
        }
        if (0..3).any(|a| self.center[a] - e[a] < -1.0 - 1e-9 || self.center[a] + e[a] > 1.0 + 1e-9) {
            return Err(CodecError::Scene(format!(
                "primitive at {:?} with extent {:?} leaves the cube [-1, 1]^3",
                self.center, e
            )));
        }
        Ok(())
    }
}

/// Closed-form density and albedo of a set of primitives.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticField {
    pub primitives: Vec<Primitive>,
}

impl AnalyticField {
    pub fn density(&self, p: Vec3) -> f64 {
        self.primitives.iter().filter(|q| q.contains(p)).map(|q| q.sigma).sum()
    }

    /// Density-weighted albedo where primitives overlap.
    pub fn color(&self, p: Vec3) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut total = 0.0;
        for q in self.primitives.iter().filter(|q| q.contains(p)) {
            for c in 0..3 {
                acc[c] += q.sigma * q.rgb[c] as f64;
            }
            total += q.sigma;
        }
        if total > 0.0 {
            acc.map(|a| a / total)
        } else {
            acc
        }
    }

    /// Composited color and opacity along one ray by midpoint quadrature.
    pub fn render_ray(&self, ray: &Ray, background: [f32; 3]) -> ([f32; 3], f32) {
        let Some((t0, t1)) = ray.clip_to_cube() else {
            return (background, 0.0);
        };
        let dt = (t1 - t0) / ORACLE_SAMPLES as f64;
        let mut trans = 1.0;
        let mut rgb = [0.0; 3];
        for i in 0..ORACLE_SAMPLES {
            let p = ray.at(t0 + (i as f64 + 0.5) * dt);
            let sigma = self.density(p);
            if sigma == 0.0 {
                continue;
            }
            let alpha = 1.0 - (-sigma * dt).exp();
            let c = self.color(p);
            for k in 0..3 {
                rgb[k] += trans * alpha * c[k];
            }
            trans *= 1.0 - alpha;
        }
        let out = [0, 1, 2].map(|k| (rgb[k] + trans * background[k] as f64) as f32);
        (out, (1.0 - trans) as f32)
    }

    pub fn render_view(&self, view: &CameraView, near: f64, far: f64, background: [f32; 3]) -> Image {
        let rays = view.generate_rays(near, far);
        let mut rgb = Vec::with_capacity(rays.len() * 3);
        let mut alpha = Vec::with_capacity(rays.len());
        for r in &rays {
            let (c, a) = self.render_ray(r, background);
            rgb.extend_from_slice(&c);
            alpha.push(a);
        }
        Image {
            width: view.width(),
            height: view.height(),
            rgb,
            alpha: Some(alpha),
        }
    }
}

fn white() -> [f32; 3] {
    [1.0; 3]
}

fn default_distance() -> f64 {
    4.0
}

fn default_fov() -> f64 {
    0.8
}

/// Description of a synthetic scene (TOML or JSON).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(default)]
    pub primitives: Vec<Primitive>,
    #[serde(default = "white")]
    pub background_rgb: [f32; 3],
    pub n_views: usize,
    pub image_size: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_encoder: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_finetune: Option<usize>,
    #[serde(default = "default_distance")]
    pub camera_distance: f64,
    #[serde(default = "default_fov")]
    pub camera_angle_x: f64,
}

impl SynthSpec {
    pub fn empty(n_views: usize, image_size: usize, seed: u64) -> Self {
        Self {
            primitives: Vec::new(),
            background_rgb: white(),
            n_views,
            image_size,
            seed,
            n_encoder: None,
            n_finetune: None,
            camera_distance: default_distance(),
            camera_angle_x: default_fov(),
        }
    }

    /// One to three random solids with strong density and varied albedo.
    pub fn random(seed: u64, n_views: usize, image_size: usize) -> Self {
        let mut r = rng::stream(seed, &[tag::SCENE]);
        let n = r.random_range(1..=3);
        let primitives = (0..n)
            .map(|_| {
                let kind = if r.random_bool(0.5) {
                    PrimitiveKind::Sphere
                } else {
                    PrimitiveKind::Box
                };
                let center = [0; 3].map(|_| r.random_range(-0.35..0.35));
                let room = center.iter().map(|c: &f64| 0.95 - c.abs()).fold(f64::INFINITY, f64::min);
                let size = r.random_range(0.2..0.5f64).min(room);
                let extent = match kind {
                    PrimitiveKind::Sphere => Extent::Uniform(size),
                    PrimitiveKind::Box => Extent::PerAxis([0; 3].map(|_| size * r.random_range(0.6..1.0))),
                };
                Primitive {
                    kind,
                    center,
                    radius_or_halfextent: extent,
                    sigma: r.random_range(15.0..40.0),
                    rgb: [0; 3].map(|_| r.random_range(0.05..0.95)),
                }
            })
            .collect();
        Self {
            primitives,
            ..Self::empty(n_views, image_size, seed)
        }
    }

    fn role_counts(&self) -> Result<(usize, usize)> {
        let n = self.n_views;
        let enc = self.n_encoder.unwrap_or(((n * 16) as f64 / 50.0).round().max(1.0) as usize);
        let ft = self.n_finetune.unwrap_or((((n * 24) as f64 / 50.0).round() as usize).max(enc));
        if enc == 0 || enc > ft || ft >= n {
            return Err(CodecError::Scene(format!(
                "role split {enc} encoder / {ft} finetune of {n} views leaves no eval views or breaks inclusion"
            )));
        }
        Ok((enc, ft))
    }
}

/// Renders the views of `spec` and returns the scene with its oracle field.
pub fn synth_scene(spec: &SynthSpec) -> Result<(Scene, AnalyticField)> {
    for p in &spec.primitives {
        p.validate()?;
    }
    if spec.image_size == 0 || spec.n_views == 0 {
        return Err(CodecError::Scene("need at least one view of at least one pixel".into()));
    }
    if spec.camera_distance <= 3f64.sqrt() {
        return Err(CodecError::Scene("cameras must sit outside the scene cube".into()));
    }
    let (n_enc, n_ft) = spec.role_counts()?;
    let field = AnalyticField {
        primitives: spec.primitives.clone(),
    };
    let mut r = rng::stream(spec.seed, &[tag::VIEWS]);
    let spin: f64 = r.random_range(0.0..std::f64::consts::TAU);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let n = spec.n_views;
    let size = spec.image_size;
    let near = spec.camera_distance - 3f64.sqrt();
    let far = spec.camera_distance + 3f64.sqrt();
    let mut views = Vec::with_capacity(n);
    for i in 0..n {
        let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
        let rad = (1.0 - z * z).sqrt();
        let phi = i as f64 * golden + spin;
        let eye = [rad * phi.cos(), rad * phi.sin(), z].map(|c| c * spec.camera_distance);
        let pose = Pose::look_at(eye, [0.0; 3]);
        let intrinsics = Intrinsics::from_fov(size, size, spec.camera_angle_x);
        let placeholder = Image::filled(size, size, spec.background_rgb);
        let mut view = CameraView::new(format!("r_{i:03}"), placeholder, pose, intrinsics)?;
        view.image = field.render_view(&view, near, far, spec.background_rgb);
        views.push(view);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    let mut roles = vec![Role::Eval; n];
    for (rank, &i) in order.iter().enumerate() {
        roles[i] = if rank < n_enc {
            Role::EncoderInput
        } else if rank < n_ft {
            Role::Finetune
        } else {
            Role::Eval
        };
    }
    Ok((Scene::new(views, roles, near, far, spec.background_rgb)?, field))
}
