//! Deterministic natural-looking grayscale test images.
//!
//! Each image layers a smooth illumination gradient, fractal (roughly `1/f`)
//! texture, anti-aliased shapes, a patch of oriented grating and mild sensor
//! noise, then rounds to 8 bits.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image_io::{save_image, ImagePlane};

/// Standard deviation of the additive noise, in `[0, 1]` units.
pub const SENSOR_NOISE: f64 = 2.0 / 255.0;

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Bilinearly interpolated lattice noise with cell size `cell`.
fn value_noise(rng: &mut ChaCha8Rng, w: usize, h: usize, cell: usize) -> Vec<f64> {
    let gw = w / cell + 2;
    let gh = h / cell + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let (gy, ty) = (fy.floor() as usize, smoothstep(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let (gx, tx) = (fx.floor() as usize, smoothstep(fx.fract()));
            let g = |i: usize, j: usize| grid[j * gw + i];
            let top = g(gx, gy) * (1.0 - tx) + g(gx + 1, gy) * tx;
            let bottom = g(gx, gy + 1) * (1.0 - tx) + g(gx + 1, gy + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

/// One synthetic image; the same seed always yields the same bytes.
pub fn generate_image(seed: u64, width: usize, height: usize) -> ImagePlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width, height);
    let mut img = vec![0.0; w * h];

    let angle = rng.random::<f64>() * 2.0 * PI;
    let (base, slope) = (0.3 + 0.4 * rng.random::<f64>(), 0.15 + 0.2 * rng.random::<f64>());
    let diag = ((w * w + h * h) as f64).sqrt();
    for y in 0..h {
        for x in 0..w {
            let t = ((x as f64 - w as f64 / 2.0) * angle.cos() + (y as f64 - h as f64 / 2.0) * angle.sin()) / diag;
            img[y * w + x] = base + slope * t;
        }
    }

    // octaves with amplitude proportional to scale give a 1/f-like spectrum
    let mut cell = 64;
    while cell >= 2 {
        let amp = 0.12 * cell as f64 / 64.0;
        let layer = value_noise(&mut rng, w, h, cell);
        img.iter_mut().zip(&layer).for_each(|(v, n)| *v += amp * n);
        cell /= 2;
    }

    let shapes = 4 + rng.random_range(0..5);
    for _ in 0..shapes {
        let (cx, cy) = (rng.random::<f64>() * w as f64, rng.random::<f64>() * h as f64);
        let size = 8.0 + rng.random::<f64>() * w.min(h) as f64 / 4.0;
        let level = rng.random::<f64>();
        let opacity = 0.5 + 0.5 * rng.random::<f64>();
        let disc = rng.random::<bool>();
        let edge = 0.5 + 1.5 * rng.random::<f64>();
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let dist = if disc {
                    (dx * dx + dy * dy).sqrt() - size
                } else {
                    dx.abs().max(dy.abs()) - size * 0.8
                };
                let cover = opacity * smoothstep(0.5 - dist / (2.0 * edge));
                let v = &mut img[y * w + x];
                *v = *v * (1.0 - cover) + level * cover;
            }
        }
    }

    let (gx0, gy0) = (rng.random_range(0..w / 2), rng.random_range(0..h / 2));
    let (gw, gh) = (w / 4 + rng.random_range(0..w / 4), h / 4 + rng.random_range(0..h / 4));
    let period = 4.0 + rng.random::<f64>() * 12.0;
    let theta = rng.random::<f64>() * PI;
    let contrast = 0.05 + 0.1 * rng.random::<f64>();
    for y in gy0..(gy0 + gh).min(h) {
        for x in gx0..(gx0 + gw).min(w) {
            let u = x as f64 * theta.cos() + y as f64 * theta.sin();
            img[y * w + x] += contrast * (2.0 * PI * u / period).sin();
        }
    }

    let noise = Normal::new(0.0, SENSOR_NOISE).expect("valid normal");
    let bytes: Vec<u8> = img
        .iter()
        .map(|v| ((v + noise.sample(&mut rng)).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    ImagePlane::from_bytes(w, h, 1, &bytes).expect("generated geometry is valid")
}

/// Writes `count` images named `img_000.pgm`, … into `dir` (created if needed).
pub fn write_corpus(dir: impl AsRef<Path>, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("img_{i:03}.pgm"));
            let img = generate_image(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), size, size);
            save_image(&img, &path)?;
            Ok(path)
        })
        .collect()
}
