//! Low-resolution codes: strided downsampling, nearest-codebook quantization
//! and upsampling back to full-resolution planes.

use nerfcodec_autodiff::{Real, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{CodecError, Result};
use crate::nn::Conv;
use crate::param::{Graph, LrGroup, Module, Param};
use crate::precision::Precision;
use crate::profile::Profile;
use crate::rng::{self, tag};

/// Weight of the commitment term.
pub const COMMIT_WEIGHT: f32 = 0.25;

/// Index of the row of `codebook` (`[K, D]`, row-major) closest to `query`
/// in Euclidean distance; ties go to the smaller index.
pub fn nearest<T: Real>(codebook: &[T], dim: usize, query: &[T]) -> usize {
    let mut best = (0, None::<T>);
    for (k, row) in codebook.chunks_exact(dim).enumerate() {
        let d = row.iter().zip(query).fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
        if best.1.is_none_or(|b| d < b) {
            best = (k, Some(d));
        }
    }
    best.0
}

/// Nearest code index for every spatial location of `codes` `[D, h, w]`.
pub fn quantize<T: Real>(codebook: &Tensor<T>, codes: &Tensor<T>) -> Result<Vec<usize>> {
    let (cs, ls) = (codebook.shape(), codes.shape());
    if cs.len() != 2 || cs[0] == 0 {
        return Err(CodecError::Shape(format!("codebook {cs:?} must be a non-empty [K, D]")));
    }
    if ls.len() != 3 || ls[0] != cs[1] {
        return Err(CodecError::Shape(format!("codes {ls:?} do not match codebook {cs:?}")));
    }
    let (d, n) = (ls[0], ls[1] * ls[2]);
    let mut q = vec![T::zero(); d];
    Ok((0..n)
        .map(|i| {
            for (c, x) in q.iter_mut().enumerate() {
                *x = codes.data()[c * n + i];
            }
            nearest(codebook.data(), d, &q)
        })
        .collect())
}

/// `mean((sg[codes] − e)²) + commit · mean((sg[e] − codes)²)`: the first term
/// moves only the codebook, the second only what produced `codes`.
pub fn vq_loss<T: Real>(tape: &mut Tape<T>, codes: Var, selected: Var, commit: T) -> Result<Var> {
    let l_stop = tape.detach(codes);
    let e_stop = tape.detach(selected);
    let a = tape.sub(l_stop, selected)?;
    let a = tape.square(a)?;
    let a = tape.mean(a)?;
    let b = tape.sub(e_stop, codes)?;
    let b = tape.square(b)?;
    let b = tape.mean(b)?;
    let b = tape.scale(b, commit)?;
    Ok(tape.add(a, b)?)
}

/// Codebook rows for `indices` arranged as `[D, h, w]`.
pub fn lookup<T: Real>(tape: &mut Tape<T>, codebook: Var, indices: &[usize], h: usize, w: usize) -> Result<Var> {
    let d = tape.shape(codebook)[1];
    let rows = tape.index_rows(codebook, indices)?;
    let rows = tape.permute(rows, &[1, 0])?;
    Ok(tape.reshape(rows, &[d, h, w])?)
}

/// Downsampler, codebook and upsampler shared by all three planes.
#[derive(Clone, Debug)]
pub struct CodePath {
    pub down: [Conv; 2],
    pub up: [Conv; 2],
    /// `[K, D]`.
    pub codebook: Param,
}

/// What the code path produced for one scene.
pub struct Coded {
    /// Continuous codes `[D, V′, V′]` per plane.
    pub codes: [Var; 3],
    /// Nearest-code indices per plane, row-major.
    pub indices: [Vec<usize>; 3],
    /// Selected codebook rows `[D, V′, V′]` per plane.
    pub selected: [Var; 3],
}

impl CodePath {
    pub fn new(profile: &Profile, seed: u64) -> Self {
        let (c, d, k) = (profile.channels, profile.code_dim, profile.codebook_size);
        let mut r = rng::stream(seed, &[tag::CODEBOOK]);
        let u = Uniform::new(-1.0 / k as f32, 1.0 / k as f32).expect("valid range");
        Self {
            down: [
                Conv::new2d("codes.down.0", c, c, 3, 2, seed),
                Conv::new2d("codes.down.1", c, d, 3, 2, seed),
            ],
            up: [
                Conv::new2d("codes.up.0", d, c, 3, 1, seed),
                Conv::new2d("codes.up.1", c, c, 3, 1, seed),
            ],
            codebook: Param::new("codes.codebook", Tensor::from_fn([k, d], |_| u.sample(&mut r)), LrGroup::Network),
        }
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook.shape()[0]
    }

    pub fn code_dim(&self) -> usize {
        self.codebook.shape()[1]
    }

    /// `[C, V, V]` to `[D, V/4, V/4]`.
    pub fn downsample<T: Precision>(&self, g: &mut Graph<'_, T>, plane: Var) -> Result<Var> {
        let s = g.tape.shape(plane).to_vec();
        if s.len() != 3 || s[1] % 4 != 0 || s[2] % 4 != 0 {
            return Err(CodecError::Shape(format!("plane {s:?} must have sides divisible by 4")));
        }
        let h = self.down[0].forward(g, plane)?;
        let h = g.tape.relu(h)?;
        self.down[1].forward(g, h)
    }

    /// `[D, V′, V′]` to `[C, 4V′, 4V′]`.
    pub fn upsample<T: Precision>(&self, g: &mut Graph<'_, T>, codes: Var) -> Result<Var> {
        let s = g.tape.shape(codes).to_vec();
        if s.len() != 3 || s[0] != self.code_dim() {
            return Err(CodecError::Shape(format!("codes {s:?} must be [{}, h, w]", self.code_dim())));
        }
        let h = g.tape.upsample2x(codes)?;
        let h = self.up[0].forward(g, h)?;
        let h = g.tape.relu(h)?;
        let h = g.tape.upsample2x(h)?;
        self.up[1].forward(g, h)
    }

    /// Downsamples and quantizes the three pooled planes.
    pub fn encode<T: Precision>(&self, g: &mut Graph<'_, T>, planes: [Var; 3]) -> Result<Coded> {
        let book = g.param(&self.codebook);
        let mut codes = Vec::with_capacity(3);
        let mut indices = Vec::with_capacity(3);
        let mut selected = Vec::with_capacity(3);
        for p in planes {
            let l = self.downsample(g, p)?;
            let s = g.tape.shape(l).to_vec();
            let idx = quantize(g.tape.value(book), g.tape.value(l))?;
            selected.push(lookup(&mut g.tape, book, &idx, s[1], s[2])?);
            codes.push(l);
            indices.push(idx);
        }
        let [i0, i1, i2]: [Vec<usize>; 3] = indices.try_into().expect("three planes");
        Ok(Coded {
            codes: [codes[0], codes[1], codes[2]],
            indices: [i0, i1, i2],
            selected: [selected[0], selected[1], selected[2]],
        })
    }

    /// Receiver side: codebook rows for transmitted indices, upsampled.
    pub fn decode<T: Precision>(&self, g: &mut Graph<'_, T>, indices: &[Vec<usize>; 3], res: usize) -> Result<[Var; 3]> {
        let k = self.codebook_size();
        let book = g.param(&self.codebook);
        let mut out = Vec::with_capacity(3);
        for idx in indices {
            if idx.len() != res * res {
                return Err(CodecError::Shape(format!("{} indices for a {res}x{res} grid", idx.len())));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i >= k) {
                return Err(CodecError::Shape(format!("index {bad} outside codebook of {k}")));
            }
            let e = lookup(&mut g.tape, book, idx, res, res)?;
            out.push(self.upsample(g, e)?);
        }
        Ok([out[0], out[1], out[2]])
    }

    /// Replaces rows never selected (`usage[k] == 0`) with randomly chosen
    /// code vectors from `pool` (each of length `D`). Returns how many rows
    /// were replaced.
    pub fn reseed_dead(&mut self, usage: &[u64], pool: &[Vec<f32>], seed: u64) -> usize {
        if pool.is_empty() {
            return 0;
        }
        let d = self.code_dim();
        let mut r = rng::stream(seed, &[tag::CODEBOOK, 1]);
        let book = self.codebook.make_mut();
        let mut n = 0;
        for (k, _) in usage.iter().enumerate().filter(|(_, &u)| u == 0) {
            let src = &pool[r.random_range(0..pool.len())];
            book.data_mut()[k * d..(k + 1) * d].copy_from_slice(src);
            n += 1;
        }
        n
    }
}

impl Module for CodePath {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.down.iter().chain(&self.up).for_each(|c| c.visit(f));
        f(&self.codebook);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.down.iter_mut().chain(&mut self.up).for_each(|c| c.visit_mut(f));
        f(&mut self.codebook);
    }
}
