//! Full-reference quality metrics on `[0, 1]` image planes.

use crate::error::{Error, Result};
use crate::image_io::ImagePlane;

/// Reported for a perfect match so downstream integrals stay finite.
pub const DB_CAP: f64 = 100.0;

pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_geometry(x: &ImagePlane, y: &ImagePlane) -> Result<()> {
    if (x.width(), x.height(), x.channels()) != (y.width(), y.height(), y.channels()) {
        return Err(Error::Metric(format!(
            "geometry mismatch: {}x{}x{} vs {}x{}x{}",
            x.width(),
            x.height(),
            x.channels(),
            y.width(),
            y.height(),
            y.channels()
        )));
    }
    Ok(())
}

pub fn mse(x: &ImagePlane, y: &ImagePlane) -> Result<f64> {
    same_geometry(x, y)?;
    let n = x.samples().len();
    if n == 0 {
        return Err(Error::Metric("empty image".into()));
    }
    let sum: f64 = x.samples().iter().zip(y.samples()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / n as f64)
}

/// `10 log10(1 / MSE)`, capped at [`DB_CAP`].
pub fn psnr(x: &ImagePlane, y: &ImagePlane) -> Result<f64> {
    let e = mse(x, y)?;
    Ok(if e <= 0.0 { DB_CAP } else { (-10.0 * e.log10()).min(DB_CAP) })
}

/// `-10 log10(1 - v)` for a similarity `v ≤ 1`, capped at [`DB_CAP`].
pub fn similarity_db(v: f64) -> f64 {
    let gap = 1.0 - v;
    if gap <= 0.0 {
        DB_CAP
    } else {
        (-10.0 * gap.log10()).min(DB_CAP)
    }
}

/// Number of MS-SSIM scales usable for a given smaller image side.
///
/// Scale `j` (1-based) is kept while the side exceeds `10 · 2^(j-1)`.
pub fn msssim_scales(min_side: usize) -> usize {
    (1..=MSSSIM_WEIGHTS.len())
        .take_while(|&j| min_side > 10 << (j - 1))
        .last()
        .unwrap_or(0)
}

fn gaussian_kernel(len: usize) -> Vec<f64> {
    let centre = (len as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..len)
        .map(|i| {
            let d = i as f64 - centre;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Row-major single-channel buffer.
#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    v: Vec<f64>,
}

impl Plane {
    fn map2(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            v: self.v.iter().zip(&other.v).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Separable valid-mode Gaussian filter. Sides shorter than the window use a
    /// renormalized window of the side's length.
    fn filter(&self) -> Plane {
        let kx = gaussian_kernel(SSIM_WINDOW.min(self.w));
        let ky = gaussian_kernel(SSIM_WINDOW.min(self.h));
        let ow = self.w - kx.len() + 1;
        let oh = self.h - ky.len() + 1;
        let mut horiz = vec![0.0; ow * self.h];
        for y in 0..self.h {
            let row = &self.v[y * self.w..(y + 1) * self.w];
            for x in 0..ow {
                horiz[y * ow + x] = kx.iter().zip(&row[x..]).map(|(k, v)| k * v).sum();
            }
        }
        let mut out = vec![0.0; ow * oh];
        for y in 0..oh {
            for (i, k) in ky.iter().enumerate() {
                let src = &horiz[(y + i) * ow..(y + i + 1) * ow];
                for (o, s) in out[y * ow..(y + 1) * ow].iter_mut().zip(src) {
                    *o += k * s;
                }
            }
        }
        Plane { w: ow, h: oh, v: out }
    }

    fn downsample(&self) -> Plane {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut v = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let at = |dx: usize, dy: usize| self.v[(2 * y + dy) * self.w + 2 * x + dx];
                v.push(0.25 * (at(0, 0) + at(1, 0) + at(0, 1) + at(1, 1)));
            }
        }
        Plane { w, h, v }
    }
}

/// Mean SSIM and mean contrast-structure term of one scale.
fn ssim_terms(a: &Plane, b: &Plane) -> (f64, f64) {
    let mu_a = a.filter();
    let mu_b = b.filter();
    let aa = a.map2(a, |p, q| p * q).filter();
    let bb = b.map2(b, |p, q| p * q).filter();
    let ab = a.map2(b, |p, q| p * q).filter();
    let n = mu_a.v.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.v.len() {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = aa.v[i] - ma * ma;
        let vb = bb.v[i] - mb * mb;
        let cov = ab.v[i] - ma * mb;
        let c = (2.0 * cov + C2) / (va + vb + C2);
        cs += c;
        ssim += c * (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
    }
    (ssim / n, cs / n)
}

fn msssim_plane(mut a: Plane, mut b: Plane, scales: usize) -> f64 {
    let weights = &MSSSIM_WEIGHTS[..scales];
    let total: f64 = weights.iter().sum();
    let mut value = 1.0;
    for (j, w) in weights.iter().enumerate() {
        let (ssim, cs) = ssim_terms(&a, &b);
        let term = if j + 1 == scales { ssim } else { cs };
        value *= term.max(0.0).powf(w / total);
        if j + 1 < scales {
            a = a.downsample();
            b = b.downsample();
        }
    }
    value
}

/// Multi-scale SSIM in linear form, averaged over channels. The reference comes first.
///
/// Images whose smaller side is at most 160 use fewer scales, with the
/// remaining weights renormalized.
pub fn msssim(x: &ImagePlane, y: &ImagePlane) -> Result<f64> {
    same_geometry(x, y)?;
    let scales = msssim_scales(x.width().min(x.height()));
    if scales == 0 {
        return Err(Error::Metric(format!(
            "{}x{} is too small for MS-SSIM",
            x.width(),
            x.height()
        )));
    }
    let plane = |img: &ImagePlane, c| Plane {
        w: img.width(),
        h: img.height(),
        v: img.channel(c),
    };
    let total: f64 = (0..x.channels())
        .map(|c| msssim_plane(plane(x, c), plane(y, c), scales))
        .sum();
    Ok(total / x.channels() as f64)
}

pub fn msssim_db(x: &ImagePlane, y: &ImagePlane) -> Result<f64> {
    Ok(similarity_db(msssim(x, y)?))
}
