//! Raw array kernels shared by the forward and backward passes.

use crate::real::Real;

/// `out = op(a) · op(b) + beta · out`, all matrices row-major.
///
/// `a_dims`/`b_dims` are the stored `(rows, cols)`; `ta`/`tb` transpose the
/// stored matrix before multiplying.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    a: &[T],
    a_dims: (usize, usize),
    ta: bool,
    b: &[T],
    b_dims: (usize, usize),
    tb: bool,
    out: &mut [T],
    beta: T,
) {
    let (m, k) = if ta { (a_dims.1, a_dims.0) } else { a_dims };
    let (k2, n) = if tb { (b_dims.1, b_dims.0) } else { b_dims };
    debug_assert_eq!(k, k2);
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta {
        (1, a_dims.1 as isize)
    } else {
        (a_dims.1 as isize, 1)
    };
    let (rsb, csb) = if tb {
        (1, b_dims.1 as isize)
    } else {
        (b_dims.1 as isize, 1)
    };
    // SAFETY: slices cover the strided extents computed above and `out` is a
    // distinct mutable borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel convolution over 2 or 3 spatial axes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub in_dims: Vec<usize>,
    pub out_dims: Vec<usize>,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.cin * self.kernel.pow(self.in_dims.len() as u32)
    }

    pub fn out_positions(&self) -> usize {
        self.out_dims.iter().product()
    }

    pub fn in_positions(&self) -> usize {
        self.in_dims.iter().product()
    }
}

/// Unfolds input patches into a `[cin·kᵈ, out_positions]` matrix.
pub(crate) fn im2col<T: Real>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let npos = g.out_positions();
    let mut cols = vec![T::zero(); g.patch_len() * npos];
    let k = g.kernel;
    match g.in_dims.len() {
        2 => {
            let (h, w) = (g.in_dims[0], g.in_dims[1]);
            let (ho, wo) = (g.out_dims[0], g.out_dims[1]);
            for c in 0..g.cin {
                let plane = &input[c * h * w..(c + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (c * k + ky) * k + kx;
                        let dst = &mut cols[row * npos..(row + 1) * npos];
                        for oy in 0..ho {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                            let drow = &mut dst[oy * wo..(oy + 1) * wo];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        3 => {
            let (d, h, w) = (g.in_dims[0], g.in_dims[1], g.in_dims[2]);
            let (dout, ho, wo) = (g.out_dims[0], g.out_dims[1], g.out_dims[2]);
            for c in 0..g.cin {
                let vol = &input[c * d * h * w..(c + 1) * d * h * w];
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let row = ((c * k + kz) * k + ky) * k + kx;
                            let dst = &mut cols[row * npos..(row + 1) * npos];
                            for oz in 0..dout {
                                let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for oy in 0..ho {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let base = (iz as usize * h + iy as usize) * w;
                                    let drow = &mut dst[(oz * ho + oy) * wo..(oz * ho + oy + 1) * wo];
                                    for (ox, dv) in drow.iter_mut().enumerate() {
                                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                        if ix >= 0 && ix < w as isize {
                                            *dv = vol[base + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        _ => unreachable!("convolution supports 2 or 3 spatial axes"),
    }
    cols
}

/// Adjoint of [`im2col`]: folds patch gradients back onto the input grid.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let npos = g.out_positions();
    let mut out = vec![T::zero(); g.cin * g.in_positions()];
    let k = g.kernel;
    match g.in_dims.len() {
        2 => {
            let (h, w) = (g.in_dims[0], g.in_dims[1]);
            let (ho, wo) = (g.out_dims[0], g.out_dims[1]);
            for c in 0..g.cin {
                let plane = &mut out[c * h * w..(c + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (c * k + ky) * k + kx;
                        let src = &cols[row * npos..(row + 1) * npos];
                        for oy in 0..ho {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                            for ox in 0..wo {
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    dst[ix as usize] += src[oy * wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        3 => {
            let (d, h, w) = (g.in_dims[0], g.in_dims[1], g.in_dims[2]);
            let (dout, ho, wo) = (g.out_dims[0], g.out_dims[1], g.out_dims[2]);
            for c in 0..g.cin {
                let vol = &mut out[c * d * h * w..(c + 1) * d * h * w];
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let row = ((c * k + kz) * k + ky) * k + kx;
                            let src = &cols[row * npos..(row + 1) * npos];
                            for oz in 0..dout {
                                let iz = (oz * g.stride + kz) as isize - g.pad as isize;
                                if iz < 0 || iz >= d as isize {
                                    continue;
                                }
                                for oy in 0..ho {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let base = (iz as usize * h + iy as usize) * w;
                                    let srow = (oz * ho + oy) * wo;
                                    for ox in 0..wo {
                                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                        if ix >= 0 && ix < w as isize {
                                            vol[base + ix as usize] += src[srow + ox];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        _ => unreachable!("convolution supports 2 or 3 spatial axes"),
    }
    out
}

/// How [`bilinear_taps`] treats coordinates outside the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Boundary {
    /// Clamp the coordinate onto the grid (continuous extension).
    Clamp,
    /// Corners outside the grid read as zero and receive no gradient.
    Zero,
}

/// Four interpolation corners: flat spatial offset (or `u32::MAX` when the
/// corner is outside the grid) and weight.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Taps<T> {
    pub idx: [u32; 4],
    pub w: [T; 4],
}

pub(crate) const NO_TAP: u32 = u32::MAX;

/// Bilinear corners for continuous texel coordinate `(row, col)`, where
/// integer coordinates land exactly on texel centers.
pub(crate) fn bilinear_taps<T: Real>(
    row: T,
    col: T,
    h: usize,
    w: usize,
    boundary: Boundary,
) -> Taps<T> {
    let (mut r, mut c) = (row, col);
    if boundary == Boundary::Clamp {
        r = r.max(T::zero()).min(T::from_usize(h - 1));
        c = c.max(T::zero()).min(T::from_usize(w - 1));
    }
    if !r.is_finite() || !c.is_finite() {
        return Taps {
            idx: [NO_TAP; 4],
            w: [T::zero(); 4],
        };
    }
    let r0f = r.floor();
    let c0f = c.floor();
    let fr = r - r0f;
    let fc = c - c0f;
    let r0 = r0f.to_f64() as i64;
    let c0 = c0f.to_f64() as i64;
    let one = T::one();
    let weights = [
        (one - fr) * (one - fc),
        (one - fr) * fc,
        fr * (one - fc),
        fr * fc,
    ];
    let corners = [(r0, c0), (r0, c0 + 1), (r0 + 1, c0), (r0 + 1, c0 + 1)];
    let mut idx = [NO_TAP; 4];
    let mut wts = [T::zero(); 4];
    for i in 0..4 {
        let (mut rr, mut cc) = corners[i];
        if boundary == Boundary::Clamp {
            rr = rr.min(h as i64 - 1);
            cc = cc.min(w as i64 - 1);
        }
        if rr >= 0 && rr < h as i64 && cc >= 0 && cc < w as i64 {
            idx[i] = (rr as usize * w + cc as usize) as u32;
            wts[i] = weights[i];
        }
    }
    Taps { idx, w: wts }
}

/// One output sample of 2× bilinear upsampling along an axis of length `n`:
/// `(lo, w_lo, hi, w_hi)`.
pub(crate) fn upsample_taps<T: Real>(n: usize) -> Vec<(usize, T, usize, T)> {
    let q = T::from_f64(0.25);
    let tq = T::from_f64(0.75);
    (0..2 * n)
        .map(|i| {
            let k = i / 2;
            if i % 2 == 0 {
                let lo = k.saturating_sub(1);
                (lo, q, k, tq)
            } else {
                let hi = (k + 1).min(n - 1);
                (k, tq, hi, q)
            }
        })
        .collect()
}

pub(crate) fn upsample2x_forward<T: Real>(x: &[T], lead: usize, h: usize, w: usize) -> Vec<T> {
    let rt = upsample_taps::<T>(h);
    let ct = upsample_taps::<T>(w);
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); lead * h2 * w2];
    // rows first into a temporary of shape [lead, h, w2]
    let mut tmp = vec![T::zero(); lead * h * w2];
    for l in 0..lead {
        for r in 0..h {
            let src = &x[(l * h + r) * w..(l * h + r + 1) * w];
            let dst = &mut tmp[(l * h + r) * w2..(l * h + r + 1) * w2];
            for (j, &(a, wa, b, wb)) in ct.iter().enumerate() {
                dst[j] = wa * src[a] + wb * src[b];
            }
        }
        for (i, &(a, wa, b, wb)) in rt.iter().enumerate() {
            let (ra, rb) = ((l * h + a) * w2, (l * h + b) * w2);
            let dst = &mut out[(l * h2 + i) * w2..(l * h2 + i + 1) * w2];
            for j in 0..w2 {
                dst[j] = wa * tmp[ra + j] + wb * tmp[rb + j];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Real>(g: &[T], lead: usize, h: usize, w: usize) -> Vec<T> {
    let rt = upsample_taps::<T>(h);
    let ct = upsample_taps::<T>(w);
    let (h2, w2) = (2 * h, 2 * w);
    let mut tmp = vec![T::zero(); lead * h * w2];
    for l in 0..lead {
        for (i, &(a, wa, b, wb)) in rt.iter().enumerate() {
            let src = &g[(l * h2 + i) * w2..(l * h2 + i + 1) * w2];
            for j in 0..w2 {
                tmp[(l * h + a) * w2 + j] += wa * src[j];
                tmp[(l * h + b) * w2 + j] += wb * src[j];
            }
        }
    }
    let mut out = vec![T::zero(); lead * h * w];
    for l in 0..lead {
        for r in 0..h {
            let src = &tmp[(l * h + r) * w2..(l * h + r + 1) * w2];
            let dst = &mut out[(l * h + r) * w..(l * h + r + 1) * w];
            for (j, &(a, wa, b, wb)) in ct.iter().enumerate() {
                dst[a] += wa * src[j];
                dst[b] += wb * src[j];
            }
        }
    }
    out
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `x` (shape `shape`) into the axis order `perm`.
pub(crate) fn permute<T: Real>(x: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    walk(&out_shape, &src_strides, 0, 0, &mut |off| out.push(x[off]));
    (out_shape, out)
}

/// Visits every multi-index of `shape` in row-major order, passing the
/// source offset computed from `src_strides`.
pub(crate) fn walk(
    shape: &[usize],
    src_strides: &[usize],
    dim: usize,
    base: usize,
    f: &mut impl FnMut(usize),
) {
    if dim == shape.len() {
        f(base);
        return;
    }
    if dim + 1 == shape.len() {
        let s = src_strides[dim];
        for i in 0..shape[dim] {
            f(base + i * s);
        }
        return;
    }
    for i in 0..shape[dim] {
        walk(shape, src_strides, dim + 1, base + i * src_strides[dim], f);
    }
}

/// Source strides for broadcasting `from` onto `to` (size-1 axes get stride 0).
pub(crate) fn broadcast_strides(from: &[usize], to: &[usize]) -> Vec<usize> {
    let s = strides(from);
    from.iter()
        .zip(to)
        .zip(s)
        .map(|((&f, _), st)| if f == 1 { 0 } else { st })
        .collect()
}
