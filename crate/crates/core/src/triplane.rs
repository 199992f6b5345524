//! Multi-resolution triplanes: sampling, smoothness penalty and raw dumps.

use std::path::Path;

use nerfcodec_autodiff::{Boundary, Tape, Tensor, Var};
use rand_distr::{Distribution, Normal};

use crate::error::{io_err, CodecError, Result};
use crate::param::{Graph, LrGroup, Module, Param};
use crate::precision::Precision;
use crate::rng::{self, tag};
use crate::tensor_io::Reader;

pub const PLANE_NAMES: [&str; 3] = ["xy", "yz", "xz"];

/// World axes spanned by each plane: `(row axis, column axis)`.
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (1, 2), (0, 2)];

/// Nine `C×V×V` planes: three orientations at three resolutions.
#[derive(Clone, Debug)]
pub struct Triplanes {
    pub channels: usize,
    pub resolutions: [usize; 3],
    /// Indexed `scale * 3 + plane`.
    planes: Vec<Param>,
}

impl Triplanes {
    pub fn from_fn(channels: usize, resolutions: [usize; 3], mut f: impl FnMut(usize, usize) -> Tensor) -> Result<Self> {
        let mut planes = Vec::with_capacity(9);
        for (s, &v) in resolutions.iter().enumerate() {
            for (k, name) in PLANE_NAMES.iter().enumerate() {
                let t = f(s, k);
                if t.shape() != [channels, v, v] {
                    return Err(CodecError::Shape(format!(
                        "plane {name} scale {s}: expected [{channels}, {v}, {v}], got {:?}",
                        t.shape()
                    )));
                }
                planes.push(Param::new(format!("planes.{name}.{s}"), t, LrGroup::Field));
            }
        }
        Ok(Self {
            channels,
            resolutions,
            planes,
        })
    }

    pub fn zeros(channels: usize, resolutions: [usize; 3]) -> Self {
        Self::from_fn(channels, resolutions, |s, _| {
            Tensor::zeros([channels, resolutions[s], resolutions[s]])
        })
        .expect("shapes are consistent by construction")
    }

    /// I.i.d. normal entries, for training from scratch.
    pub fn random(channels: usize, resolutions: [usize; 3], std: f32, seed: u64) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self::from_fn(channels, resolutions, |s, k| {
            let mut r = rng::stream(seed, &[tag::INIT, 100 + (s * 3 + k) as u64]);
            let v = resolutions[s];
            Tensor::from_fn([channels, v, v], |_| normal.sample(&mut r))
        })
        .expect("shapes are consistent by construction")
    }

    pub fn plane(&self, scale: usize, plane: usize) -> &Param {
        &self.planes[scale * 3 + plane]
    }

    pub fn plane_mut(&mut self, scale: usize, plane: usize) -> &mut Param {
        &mut self.planes[scale * 3 + plane]
    }

    pub fn entries(&self) -> usize {
        3 * self.channels * self.resolutions.iter().map(|v| v * v).sum::<usize>()
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.resolutions == other.resolutions
            && self.planes.iter().zip(&other.planes).all(|(a, b)| a.value().bit_eq(b.value()))
    }

    pub fn bind<T: Precision>(&self, g: &mut Graph<'_, T>) -> FieldVars {
        FieldVars {
            channels: self.channels,
            resolutions: self.resolutions,
            base: self.planes.iter().map(|p| g.param(p)).collect(),
            delta: None,
        }
    }

    /// Little-endian dump: u32 header `{C, V1, V2, V3}`, then the planes in
    /// order (xy, yz, xz), each at scales 1, 2, 3, row-major f32.
    pub fn to_raw(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.entries());
        out.extend_from_slice(&(self.channels as u32).to_le_bytes());
        for v in self.resolutions {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for k in 0..3 {
            for s in 0..3 {
                for &x in self.plane(s, k).value().data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_raw(bytes: &[u8]) -> Result<Self> {
        let short = || CodecError::Shape("truncated triplane dump".into());
        let mut r = Reader { bytes, pos: 0 };
        let c = r.u32().ok_or_else(short)? as usize;
        let mut res = [0usize; 3];
        for v in &mut res {
            *v = r.u32().ok_or_else(short)? as usize;
        }
        let mut data: Vec<Vec<Tensor>> = vec![Vec::new(); 3];
        for plane in &mut data {
            for &v in &res {
                let vals = (0..c * v * v).map(|_| r.f32().ok_or_else(short)).collect::<Result<Vec<_>>>()?;
                plane.push(Tensor::new([c, v, v], vals).expect("extent product"));
            }
        }
        if r.remaining() != 0 {
            return Err(CodecError::Shape("trailing bytes after triplane dump".into()));
        }
        Self::from_fn(c, res, |s, k| data[k][s].clone())
    }

    pub fn save_raw(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_raw()).map_err(io_err(path))
    }

    pub fn load_raw(path: &Path) -> Result<Self> {
        Self::from_raw(&std::fs::read(path).map_err(io_err(path))?)
    }
}

impl Module for Triplanes {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.planes.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.planes.visit_mut(f)
    }
}

/// Triplanes bound on a tape, optionally with an additive factorized delta.
#[derive(Clone, Debug)]
pub struct FieldVars {
    pub channels: usize,
    pub resolutions: [usize; 3],
    /// `[C, V, V]` nodes indexed `scale * 3 + plane`.
    pub base: Vec<Var>,
    pub delta: Option<DeltaVars>,
}

/// Delta factors on a tape: `matrices[(scale * 3 + plane) * rank + r]` is
/// `[1, V, V]` and `vectors[scale * rank + r]` is `[1, C]`.
#[derive(Clone, Debug)]
pub struct DeltaVars {
    pub rank: usize,
    pub matrices: Vec<Var>,
    pub vectors: Vec<Var>,
}

/// Continuous texel coordinate of `c ∈ [−1, 1]` on a grid of `v` texels whose
/// centers sit at `−1 + (2i + 1)/v`.
pub fn texel<T: Precision>(c: T, v: usize) -> T {
    let half = T::from_f64(0.5);
    let v = T::from_usize(v);
    (c + T::one()) * half * v - half
}

/// Texel coordinates of every point on one plane.
pub fn plane_coords<T: Precision>(points: &[[T; 3]], plane: usize, v: usize) -> Vec<[T; 2]> {
    let (a, b) = PLANE_AXES[plane];
    points.iter().map(|p| [texel(p[a], v), texel(p[b], v)]).collect()
}

/// Features `[N, 3C]` of `points`: per plane, bilinear lookups at the three
/// scales are concatenated, then the three planes are summed. Points outside
/// the cube read the nearest boundary texel.
pub fn sample_features<T: Precision>(tape: &mut Tape<T>, field: &FieldVars, points: &[[T; 3]]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for k in 0..3 {
        let mut per_scale = Vec::with_capacity(3);
        for (s, &v) in field.resolutions.iter().enumerate() {
            let coords = plane_coords(points, k, v);
            let mut f = tape.gather2d(field.base[s * 3 + k], &coords, Boundary::Clamp)?;
            if let Some(d) = &field.delta {
                for r in 0..d.rank {
                    let m = tape.gather2d(d.matrices[(s * 3 + k) * d.rank + r], &coords, Boundary::Clamp)?;
                    let outer = tape.matmul(m, d.vectors[s * d.rank + r])?;
                    f = tape.add(f, outer)?;
                }
            }
            per_scale.push(f);
        }
        let cat = tape.concat(&per_scale, 1)?;
        total = Some(match total {
            Some(t) => tape.add(t, cat)?,
            None => cat,
        });
    }
    Ok(total.expect("three planes"))
}

/// Effective plane `base + Σ_r v_r ∘ M_r` for one (scale, plane) as `[C, V, V]`.
pub fn effective_plane<T: Precision>(tape: &mut Tape<T>, field: &FieldVars, scale: usize, plane: usize) -> Result<Var> {
    let base = field.base[scale * 3 + plane];
    match &field.delta {
        None => Ok(base),
        Some(d) => {
            let delta = materialize(tape, d, field.channels, field.resolutions[scale], scale, plane)?;
            Ok(tape.add(base, delta)?)
        }
    }
}

/// `Σ_r v_r ∘ M_r` as a `[C, V, V]` node.
pub fn materialize<T: Precision>(
    tape: &mut Tape<T>,
    d: &DeltaVars,
    channels: usize,
    v: usize,
    scale: usize,
    plane: usize,
) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for r in 0..d.rank {
        let vec = tape.reshape(d.vectors[scale * d.rank + r], &[channels, 1, 1])?;
        let vec = tape.broadcast_to(vec, &[channels, v, v])?;
        let mat = tape.broadcast_to(d.matrices[(scale * 3 + plane) * d.rank + r], &[channels, v, v])?;
        let term = tape.mul(vec, mat)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("rank is at least one"))
}

/// Squared neighbor differences over every plane and scale, divided by the
/// total number of triplane entries.
pub fn tv_loss<T: Precision>(tape: &mut Tape<T>, field: &FieldVars) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for s in 0..3 {
        for k in 0..3 {
            let p = effective_plane(tape, field, s, k)?;
            let tv = tape.total_variation(p)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, tv)?,
                None => tv,
            });
        }
    }
    let entries = 3 * field.channels * field.resolutions.iter().map(|v| v * v).sum::<usize>();
    Ok(tape.scale(acc.expect("nine planes"), T::one() / T::from_usize(entries))?)
}
