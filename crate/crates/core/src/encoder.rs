//! Feed-forward path from posed images to multi-resolution triplanes.

use nerfcodec_autodiff::{Boundary, Tape, Tensor, Var};

use crate::error::{CodecError, Result};
use crate::nn::Conv;
use crate::param::{Graph, Module, Param};
use crate::precision::Precision;
use crate::profile::Profile;
use crate::scene::CameraView;
use crate::triplane::PLANE_AXES;

/// Three-level convolutional pyramid with top-down fusion, shared by all
/// views. Input images need sides divisible by 4.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub down: [Conv; 3],
    pub lateral: [Conv; 3],
    pub out: Conv,
}

impl FeaturePyramid {
    pub fn new(widths: [usize; 3], channels: usize, seed: u64) -> Self {
        let n = |s: &str| format!("encoder.pyramid.{s}");
        Self {
            down: [
                Conv::new2d(&n("down.0"), 3, widths[0], 3, 1, seed),
                Conv::new2d(&n("down.1"), widths[0], widths[1], 3, 2, seed),
                Conv::new2d(&n("down.2"), widths[1], widths[2], 3, 2, seed),
            ],
            lateral: [
                Conv::new2d(&n("lateral.0"), widths[0], channels, 1, 1, seed),
                Conv::new2d(&n("lateral.1"), widths[1], channels, 1, 1, seed),
                Conv::new2d(&n("lateral.2"), widths[2], channels, 1, 1, seed),
            ],
            out: Conv::new2d(&n("out"), channels, channels, 3, 1, seed),
        }
    }

    /// `image` `[3, h, w]` to features `[C, h, w]`.
    pub fn forward<T: Precision>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let s = g.tape.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 || s[1] % 4 != 0 || s[2] % 4 != 0 || s[1] == 0 || s[2] == 0 {
            return Err(CodecError::Shape(format!("pyramid input {s:?} must be [3, 4a, 4b]")));
        }
        let mut levels = Vec::with_capacity(3);
        let mut x = image;
        for c in &self.down {
            let z = c.forward(g, x)?;
            x = g.tape.relu(z)?;
            levels.push(x);
        }
        let mut top = self.lateral[2].forward(g, levels[2])?;
        for i in (0..2).rev() {
            let up = g.tape.upsample2x(top)?;
            let lat = self.lateral[i].forward(g, levels[i])?;
            top = g.tape.add(lat, up)?;
        }
        self.out.forward(g, top)
    }
}

impl Module for FeaturePyramid {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.down.iter().chain(&self.lateral).chain([&self.out]).for_each(|c| c.visit(f));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.down
            .iter_mut()
            .chain(&mut self.lateral)
            .chain([&mut self.out])
            .for_each(|c| c.visit_mut(f));
    }
}

/// Center of grid cell `i` along one axis of a `v`-cell grid over `[−1, 1]`.
pub fn cell_center(i: usize, v: usize) -> f64 {
    -1.0 + (2 * i + 1) as f64 / v as f64
}

/// World coordinates of every grid cell, `(x, y, z)` with `z` fastest.
pub fn grid_points(v: usize) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(v * v * v);
    for x in 0..v {
        for y in 0..v {
            for z in 0..v {
                out.push([cell_center(x, v), cell_center(y, v), cell_center(z, v)]);
            }
        }
    }
    out
}

/// Frustum mask `[v, v, v]`: 1 where the cell center lands inside the image
/// in front of the camera.
pub fn visibility<T: Precision>(view: &CameraView, v: usize) -> (Vec<[f64; 2]>, Tensor<T>) {
    let (uv, inside): (Vec<_>, Vec<_>) = grid_points(v).into_iter().map(|p| view.project(p)).unzip();
    let mask = inside.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
    (uv, Tensor::new([v, v, v], mask).expect("grid shape"))
}

/// Lifts a feature map `[C, h, w]` onto the grid: each cell takes the
/// bilinearly sampled feature at its projection, or zero outside the frustum.
/// Returns the volume `[C, v, v, v]` and its mask `[v, v, v]`.
pub fn unproject<T: Precision>(tape: &mut Tape<T>, features: Var, view: &CameraView, v: usize) -> Result<(Var, Tensor<T>)> {
    let c = tape.shape(features)[0];
    let (uv, mask) = visibility::<T>(view, v);
    let coords: Vec<[T; 2]> = uv
        .iter()
        .zip(mask.data())
        .map(|(p, &m)| {
            if m > T::zero() {
                [T::from_f64(p[1] - 0.5), T::from_f64(p[0] - 0.5)]
            } else {
                [T::from_f64(-2.0), T::from_f64(-2.0)]
            }
        })
        .collect();
    let n = coords.len();
    let s = tape.gather2d(features, &coords, Boundary::Zero)?;
    let m = tape.constant(Tensor::from_fn([n, c], |i| mask.data()[i / c]));
    let s = tape.mul(s, m)?;
    let s = tape.permute(s, &[1, 0])?;
    Ok((tape.reshape(s, &[c, v, v, v])?, mask))
}

/// Mask-weighted view average followed by two 3×3×3 convolutions.
#[derive(Clone, Debug)]
pub struct Aggregator {
    pub first: Conv,
    pub second: Conv,
}

impl Aggregator {
    pub fn new(channels: usize, seed: u64) -> Self {
        Self {
            first: Conv::new3d("encoder.aggregate.0", channels, channels, 3, 1, seed),
            second: Conv::new3d("encoder.aggregate.1", channels, channels, 3, 1, seed),
        }
    }

    pub fn forward<T: Precision>(&self, g: &mut Graph<'_, T>, volumes: &[Var], masks: &[Tensor<T>]) -> Result<Var> {
        if volumes.is_empty() {
            return Err(CodecError::Shape("aggregation needs at least one view".into()));
        }
        let mean = g.tape.masked_mean(volumes, masks)?;
        let h = self.first.forward(g, mean)?;
        let h = g.tape.relu(h)?;
        self.second.forward(g, h)
    }
}

impl Module for Aggregator {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.first.visit(f);
        self.second.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.first.visit_mut(f);
        self.second.visit_mut(f);
    }
}

/// Averages a volume `[C, X, Y, Z]` along each axis into the planes
/// `xy [C, X, Y]`, `yz [C, Y, Z]` and `xz [C, X, Z]`.
pub fn axis_pool<T: Precision>(tape: &mut Tape<T>, volume: Var) -> Result<[Var; 3]> {
    let s = tape.shape(volume).to_vec();
    if s.len() != 4 {
        return Err(CodecError::Shape(format!("volume {s:?} must be [C, X, Y, Z]")));
    }
    let (c, x, y, z) = (s[0], s[1], s[2], s[3]);
    let xy = tape.mean_axis(volume, 3)?;
    let xy = tape.reshape(xy, &[c, x, y])?;
    let yz = tape.mean_axis(volume, 1)?;
    let yz = tape.reshape(yz, &[c, y, z])?;
    let xz = tape.mean_axis(volume, 2)?;
    let xz = tape.reshape(xz, &[c, x, z])?;
    Ok([xy, yz, xz])
}

/// Images to the pooled planes that feed the code path.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub pyramid: FeaturePyramid,
    pub aggregator: Aggregator,
    pub volume_res: usize,
}

impl Encoder {
    pub fn new(profile: &Profile, seed: u64) -> Self {
        Self {
            pyramid: FeaturePyramid::new(profile.pyramid, profile.channels, seed),
            aggregator: Aggregator::new(profile.channels, seed),
            volume_res: profile.volume_res,
        }
    }

    /// Aggregated feature volume `[C, V, V, V]`.
    pub fn volume<T: Precision>(&self, g: &mut Graph<'_, T>, views: &[&CameraView]) -> Result<Var> {
        let Some(first) = views.first() else {
            return Err(CodecError::Shape("encoder needs at least one view".into()));
        };
        let (w, h) = (first.width(), first.height());
        let mut volumes = Vec::with_capacity(views.len());
        let mut masks = Vec::with_capacity(views.len());
        for view in views {
            if (view.width(), view.height()) != (w, h) {
                return Err(CodecError::Shape(format!(
                    "view {} is {}x{}, expected {w}x{h}",
                    view.name,
                    view.width(),
                    view.height()
                )));
            }
            let img = g.lift(Tensor::new([3, h, w], view.image.planar())?);
            let f = self.pyramid.forward(g, img)?;
            let (vol, mask) = unproject(&mut g.tape, f, view, self.volume_res)?;
            volumes.push(vol);
            masks.push(mask);
        }
        self.aggregator.forward(g, &volumes, &masks)
    }

    /// Pooled planes `[C, V, V]` in `xy, yz, xz` order.
    pub fn planes<T: Precision>(&self, g: &mut Graph<'_, T>, views: &[&CameraView]) -> Result<[Var; 3]> {
        let vol = self.volume(g, views)?;
        axis_pool(&mut g.tape, vol)
    }
}

impl Module for Encoder {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.pyramid.visit(f);
        self.aggregator.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.pyramid.visit_mut(f);
        self.aggregator.visit_mut(f);
    }
}

/// Summary of plane `from` along the axis it shares with plane `to`,
/// broadcast back over the whole of `to`.
fn cross_summary<T: Precision>(tape: &mut Tape<T>, planes: &[Var; 3], from: usize, to: usize) -> Result<Var> {
    let (a, b) = PLANE_AXES[to];
    let (fa, fb) = PLANE_AXES[from];
    let shared = if fa == a || fa == b { fa } else { fb };
    let pooled_axis = if shared == fa { 2 } else { 1 };
    let s = tape.shape(planes[to]).to_vec();
    let (c, n) = (s[0], tape.shape(planes[from])[3 - pooled_axis]);
    let p = tape.mean_axis(planes[from], pooled_axis)?;
    let p = if shared == a {
        tape.reshape(p, &[c, n, 1])?
    } else {
        tape.reshape(p, &[c, 1, n])?
    };
    Ok(tape.broadcast_to(p, &s)?)
}

/// One convolution, shared by the three planes, over each plane concatenated
/// with the axis summaries of the other two.
#[derive(Clone, Debug)]
pub struct AwareBlock {
    pub conv: Conv,
}

impl AwareBlock {
    pub fn forward<T: Precision>(&self, g: &mut Graph<'_, T>, planes: &[Var; 3]) -> Result<[Var; 3]> {
        let mut out = Vec::with_capacity(3);
        for k in 0..3 {
            let mut parts = vec![planes[k]];
            for j in (0..3).filter(|&j| j != k) {
                parts.push(cross_summary(&mut g.tape, planes, j, k)?);
            }
            let x = g.tape.concat(&parts, 0)?;
            out.push(self.conv.forward(g, x)?);
        }
        Ok([out[0], out[1], out[2]])
    }
}

/// `x + conv₂(relu(conv₁(x)))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub first: Conv,
    pub second: Conv,
}

impl ResBlock {
    pub fn forward<T: Precision>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.first.forward(g, x)?;
        let h = g.tape.relu(h)?;
        let h = self.second.forward(g, h)?;
        Ok(g.tape.add(x, h)?)
    }
}

/// Turns three reconstructed planes into the nine multi-resolution planes.
#[derive(Clone, Debug)]
pub struct Generator {
    pub aware: Vec<AwareBlock>,
    pub refine: Vec<ResBlock>,
    /// Convolution after each 2× upsampling between scales.
    pub grow: Vec<Conv>,
    pub base_res: usize,
}

impl Generator {
    pub fn new(profile: &Profile, seed: u64) -> Self {
        let c = profile.channels;
        let n = |s: String| format!("generator.{s}");
        Self {
            aware: (0..3)
                .map(|s| AwareBlock {
                    conv: Conv::new2d(&n(format!("aware.{s}")), 3 * c, c, 3, 1, seed),
                })
                .collect(),
            refine: (0..3)
                .map(|s| ResBlock {
                    first: Conv::new2d(&n(format!("refine.{s}.0")), c, c, 3, 1, seed),
                    second: Conv::new2d(&n(format!("refine.{s}.1")), c, c, 3, 1, seed),
                })
                .collect(),
            grow: (0..2).map(|s| Conv::new2d(&n(format!("grow.{s}")), c, c, 3, 1, seed)).collect(),
            base_res: profile.resolutions[0],
        }
    }

    /// Planes indexed `scale * 3 + plane`.
    pub fn forward<T: Precision>(&self, g: &mut Graph<'_, T>, planes: [Var; 3]) -> Result<Vec<Var>> {
        for &p in &planes {
            let s = g.tape.shape(p);
            if s.len() != 3 || s[1] != self.base_res || s[2] != self.base_res {
                return Err(CodecError::Shape(format!(
                    "generator input {s:?} must be [C, {0}, {0}]",
                    self.base_res
                )));
            }
        }
        let mut out = Vec::with_capacity(9);
        let mut cur = planes;
        for s in 0..3 {
            if s > 0 {
                let mut grown = Vec::with_capacity(3);
                for &p in &cur {
                    let u = g.tape.upsample2x(p)?;
                    grown.push(self.grow[s - 1].forward(g, u)?);
                }
                cur = [grown[0], grown[1], grown[2]];
            }
            let mixed = self.aware[s].forward(g, &cur)?;
            let mut refined = Vec::with_capacity(3);
            for p in mixed {
                refined.push(self.refine[s].forward(g, p)?);
            }
            cur = [refined[0], refined[1], refined[2]];
            out.extend(cur);
        }
        Ok(out)
    }
}

impl Module for Generator {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        for b in &self.aware {
            b.conv.visit(f);
        }
        for b in &self.refine {
            b.first.visit(f);
            b.second.visit(f);
        }
        self.grow.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in &mut self.aware {
            b.conv.visit_mut(f);
        }
        for b in &mut self.refine {
            b.first.visit_mut(f);
            b.second.visit_mut(f);
        }
        self.grow.visit_mut(f);
    }
}
