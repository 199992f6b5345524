//! Image quality: PSNR, SSIM and MS-SSIM on RGB images in `[0, 1]`.

use crate::error::{CodecError, Result};
use crate::scene::Image;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn check(a: &Image, b: &Image) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) || a.rgb.len() != b.rgb.len() {
        return Err(CodecError::Shape(format!(
            "images differ in size: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let s: f64 = a.rgb.iter().zip(&b.rgb).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(s / a.rgb.len().max(1) as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// One channel as a row-major `f64` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Channel {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Channel {
    pub fn of(img: &Image, c: usize) -> Self {
        Self {
            width: img.width,
            height: img.height,
            data: img.rgb.iter().skip(c).step_by(3).map(|&v| v as f64).collect(),
        }
    }

    /// 2×2 average pooling (odd trailing rows and columns dropped).
    pub fn halve(&self) -> Self {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let at = |dy: usize, dx: usize| self.data[(2 * y + dy) * self.width + 2 * x + dx];
                data.push(0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)));
            }
        }
        Self { width: w, height: h, data }
    }
}

fn gaussian(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Calls `f(luminance, contrast_structure)` at every valid window position
/// and returns the number of positions. Windows shrink to the image when it
/// is smaller than 11 pixels.
fn for_windows(a: &Channel, b: &Channel, mut f: impl FnMut(f64, f64)) -> usize {
    let size = SSIM_WINDOW.min(a.width).min(a.height).max(1);
    let g = gaussian(size);
    let (c1, c2) = (SSIM_K1.powi(2), SSIM_K2.powi(2));
    let (nx, ny) = (a.width + 1 - size, a.height + 1 - size);
    for oy in 0..ny {
        for ox in 0..nx {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (j, &gy) in g.iter().enumerate() {
                for (i, &gx) in g.iter().enumerate() {
                    let w = gy * gx;
                    let idx = (oy + j) * a.width + ox + i;
                    let (x, y) = (a.data[idx], b.data[idx]);
                    ma += w * x;
                    mb += w * y;
                    saa += w * x * x;
                    sbb += w * y * y;
                    sab += w * x * y;
                }
            }
            let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            let cs = (2.0 * (sab - ma * mb) + c2) / (saa - ma * ma + sbb - mb * mb + c2);
            f(l, cs);
        }
    }
    nx * ny
}

/// Mean luminance term and mean contrast-structure term over all windows.
pub fn ssim_terms(a: &Channel, b: &Channel) -> (f64, f64) {
    let (mut lum, mut cs) = (0.0, 0.0);
    let n = for_windows(a, b, |l, c| {
        lum += l;
        cs += c;
    }) as f64;
    (lum / n, cs / n)
}

fn ssim_channel(a: &Channel, b: &Channel) -> f64 {
    let mut total = 0.0;
    let n = for_windows(a, b, |l, c| total += l * c);
    total / n as f64
}

/// SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    Ok((0..3).map(|c| ssim_channel(&Channel::of(a, c), &Channel::of(b, c))).sum::<f64>() / 3.0)
}

/// Five-scale MS-SSIM, averaged over channels. Negative contrast-structure
/// terms are clamped to zero before the fractional powers.
pub fn ms_ssim(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let mut total = 0.0;
    for c in 0..3 {
        let (mut x, mut y) = (Channel::of(a, c), Channel::of(b, c));
        let mut v = 1.0;
        for (s, &w) in MS_SSIM_WEIGHTS.iter().enumerate() {
            if x.width == 0 || x.height == 0 {
                break;
            }
            let last = s + 1 == MS_SSIM_WEIGHTS.len() || x.width < 2 || x.height < 2;
            if last {
                v *= ssim_channel(&x, &y).max(0.0).powf(w);
                break;
            }
            let (_, cs) = ssim_terms(&x, &y);
            v *= cs.max(0.0).powf(w);
            x = x.halve();
            y = y.halve();
        }
        total += v;
    }
    Ok(total / 3.0)
}

/// Averages of the three metrics over image pairs.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct Quality {
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
}

pub fn quality(pairs: &[(Image, &Image)]) -> Result<Quality> {
    let n = pairs.len().max(1) as f64;
    let mut q = Quality::default();
    for (a, b) in pairs {
        q.psnr += psnr(a, b)? / n;
        q.ssim += ssim(a, b)? / n;
        q.ms_ssim += ms_ssim(a, b)? / n;
    }
    Ok(q)
}
