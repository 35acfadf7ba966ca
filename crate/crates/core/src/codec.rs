//! Level-parameterized affine patch codec.
//!
//! Each quality level `k` owns an analysis map `y = A_k (p - a_k)`, a synthesis
//! map `p = S_k y + s_k` and a uniform mid-tread quantizer with step `Δ_k`.
//! Every level shares the patch size `B` and the latent width `M`, so latents
//! of adjacent levels can be related by `M x M` transform modules.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image_io::{unpatchify, ImagePlane, PatchGeometry, PatchMatrix};

pub type Level = u8;

/// Tolerance used when checking that quantized entries sit on the grid.
pub const GRID_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub patch_size: usize,
    pub latent_dim: usize,
    pub min_level: Level,
    pub max_level: Level,
    /// Quantizer step at `min_level`.
    pub step_base: f64,
    /// Step multiplier per level increment.
    pub step_ratio: f64,
    /// RD weight at level 0; `λ_k = lambda_base * lambda_ratio^k`.
    pub lambda_base: f64,
    pub lambda_ratio: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            latent_dim: 16,
            min_level: 1,
            max_level: 6,
            step_base: 0.48,
            step_ratio: 0.5,
            lambda_base: 0.01,
            lambda_ratio: 4.0,
        }
    }
}

impl CodecConfig {
    pub fn step(&self, level: Level) -> f64 {
        self.step_base * self.step_ratio.powi(i32::from(level) - i32::from(self.min_level))
    }

    pub fn lambda(&self, level: Level) -> f64 {
        self.lambda_base * self.lambda_ratio.powi(i32::from(level))
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.latent_dim == 0 {
            return Err(Error::Config("patch_size and latent_dim must be positive".into()));
        }
        if self.latent_dim > self.patch_size * self.patch_size {
            return Err(Error::Config("latent_dim cannot exceed patch_size^2".into()));
        }
        if self.min_level > self.max_level {
            return Err(Error::Config("min_level must not exceed max_level".into()));
        }
        if !(self.step_base > 0.0 && self.step_ratio > 0.0 && self.step_ratio < 1.0) {
            return Err(Error::Config("step schedule must be positive and strictly decreasing".into()));
        }
        if !(self.lambda_base > 0.0 && self.lambda_ratio > 1.0) {
            return Err(Error::Config("lambda schedule must be positive and strictly increasing".into()));
        }
        Ok(())
    }
}

/// One quality level: analysis, synthesis and quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelModel {
    pub level: Level,
    pub lambda: f64,
    /// `M x B²`
    pub analysis: DMatrix<f64>,
    /// `B²`
    pub analysis_bias: DVector<f64>,
    /// `B² x M`
    pub synthesis: DMatrix<f64>,
    /// `B²`
    pub synthesis_bias: DVector<f64>,
    pub quant_step: f64,
}

impl LevelModel {
    fn is_finite(&self) -> bool {
        self.analysis.iter().all(|v| v.is_finite())
            && self.analysis_bias.iter().all(|v| v.is_finite())
            && self.synthesis.iter().all(|v| v.is_finite())
            && self.synthesis_bias.iter().all(|v| v.is_finite())
            && self.lambda.is_finite()
            && self.quant_step.is_finite()
    }
}

/// A latent representation at one level, optionally quantized.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub level: Level,
    /// Step of the quantizer that produced this latent, if quantized.
    pub step: Option<f64>,
    /// `num_patches x M`
    pub data: DMatrix<f64>,
    pub geometry: PatchGeometry,
}

impl Latent {
    pub fn is_quantized(&self) -> bool {
        self.step.is_some()
    }

    pub fn num_patches(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    /// Integer quantization indices. Fails for unquantized latents.
    pub fn indices(&self) -> Result<Vec<i64>> {
        let step = self
            .step
            .ok_or_else(|| Error::Quantization("latent is not quantized".into()))?;
        Ok(self.data.iter().map(|v| (v / step).round() as i64).collect())
    }
}

/// Mid-tread uniform quantizer, ties rounded half away from zero.
#[inline]
pub fn quantize_value(v: f64, step: f64) -> f64 {
    step * (v / step).round()
}

/// The bank of per-level codecs sharing `B` and `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecFamily {
    patch_size: usize,
    latent_dim: usize,
    levels: BTreeMap<Level, LevelModel>,
    version: String,
}

impl CodecFamily {
    /// Validates the level bank and derives the content-addressed version tag.
    pub fn new(patch_size: usize, latent_dim: usize, levels: Vec<LevelModel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidFamily("no levels".into()));
        }
        let b2 = patch_size * patch_size;
        let mut map = BTreeMap::new();
        for m in levels {
            let shapes_ok = m.analysis.shape() == (latent_dim, b2)
                && m.analysis_bias.len() == b2
                && m.synthesis.shape() == (b2, latent_dim)
                && m.synthesis_bias.len() == b2;
            if !shapes_ok {
                return Err(Error::InvalidFamily(format!("level {} has inconsistent shapes", m.level)));
            }
            if !m.is_finite() {
                return Err(Error::InvalidFamily(format!("level {} has non-finite entries", m.level)));
            }
            if !(m.quant_step > 0.0 && m.lambda > 0.0) {
                return Err(Error::InvalidFamily(format!("level {} needs positive step and lambda", m.level)));
            }
            if map.insert(m.level, m).is_some() {
                return Err(Error::InvalidFamily("duplicate level".into()));
            }
        }
        let (lo, hi) = (*map.keys().next().unwrap(), *map.keys().next_back().unwrap());
        if map.len() != usize::from(hi - lo) + 1 {
            return Err(Error::InvalidFamily("level range is not contiguous".into()));
        }
        for (a, b) in map.values().zip(map.values().skip(1)) {
            if !(b.lambda > a.lambda) {
                return Err(Error::InvalidFamily(format!(
                    "lambda must increase with level ({} -> {})",
                    a.level, b.level
                )));
            }
            if !(b.quant_step < a.quant_step) {
                return Err(Error::InvalidFamily(format!(
                    "quantizer step must decrease with level ({} -> {})",
                    a.level, b.level
                )));
            }
        }
        let mut family = Self {
            patch_size,
            latent_dim,
            levels: map,
            version: String::new(),
        };
        family.version = family.content_hash();
        Ok(family)
    }

    /// PCA-initialized family: every level shares the top-`M` principal basis of
    /// the training patches, scaled per level by `g_{k,i} = 1 / (1 + i (s - k) / M)`.
    pub fn from_pca(cfg: &CodecConfig, patches: &DMatrix<f64>) -> Result<Self> {
        cfg.validate()?;
        let b2 = cfg.patch_size * cfg.patch_size;
        if patches.ncols() != b2 {
            return Err(Error::Geometry(format!("expected {b2}-wide patch rows, got {}", patches.ncols())));
        }
        if patches.nrows() < 2 {
            return Err(Error::Data("need at least two patches for PCA".into()));
        }
        let (mean, basis) = principal_basis(patches, cfg.latent_dim);
        let m = cfg.latent_dim;
        let levels = (cfg.min_level..=cfg.max_level)
            .map(|k| {
                let gains = level_gains(m, cfg.max_level - k);
                let analysis = DMatrix::from_diagonal(&gains) * basis.transpose();
                let inv = gains.map(|g| 1.0 / g);
                let synthesis = &basis * DMatrix::from_diagonal(&inv);
                LevelModel {
                    level: k,
                    lambda: cfg.lambda(k),
                    analysis,
                    analysis_bias: mean.clone(),
                    synthesis,
                    synthesis_bias: mean.clone(),
                    quant_step: cfg.step(k),
                }
            })
            .collect();
        Self::new(cfg.patch_size, m, levels)
    }

    fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.patch_size as u64).to_le_bytes());
        h.update((self.latent_dim as u64).to_le_bytes());
        for m in self.levels.values() {
            h.update([m.level]);
            for v in [m.lambda, m.quant_step]
                .iter()
                .chain(m.analysis.iter())
                .chain(m.analysis_bias.iter())
                .chain(m.synthesis.iter())
                .chain(m.synthesis_bias.iter())
            {
                h.update(v.to_le_bytes());
            }
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn min_level(&self) -> Level {
        *self.levels.keys().next().unwrap()
    }

    pub fn max_level(&self) -> Level {
        *self.levels.keys().next_back().unwrap()
    }

    pub fn levels(&self) -> impl Iterator<Item = &LevelModel> {
        self.levels.values()
    }

    pub fn level(&self, k: Level) -> Result<&LevelModel> {
        self.levels.get(&k).ok_or(Error::LevelOutOfRange {
            level: k,
            min: self.min_level(),
            max: self.max_level(),
        })
    }

    pub fn step(&self, k: Level) -> Result<f64> {
        Ok(self.level(k)?.quant_step)
    }

    /// Returns a copy with the synthesis of level `k` replaced.
    pub fn with_synthesis(&self, k: Level, synthesis: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        let mut levels: Vec<LevelModel> = self.levels.values().cloned().collect();
        let slot = levels
            .iter_mut()
            .find(|m| m.level == k)
            .ok_or(Error::LevelOutOfRange {
                level: k,
                min: self.min_level(),
                max: self.max_level(),
            })?;
        slot.synthesis = synthesis;
        slot.synthesis_bias = bias;
        Self::new(self.patch_size, self.latent_dim, levels)
    }

    /// `g_a^k`: maps each patch row `p` to `A_k (p - a_k)`.
    pub fn analysis(&self, k: Level, patches: &PatchMatrix) -> Result<Latent> {
        let m = self.level(k)?;
        if patches.patch_size() != self.patch_size {
            return Err(Error::Geometry(format!(
                "patch size {} does not match family patch size {}",
                patches.patch_size(),
                self.patch_size
            )));
        }
        let mut centered = patches.rows.clone();
        for mut row in centered.row_iter_mut() {
            row -= m.analysis_bias.transpose();
        }
        Ok(Latent {
            level: k,
            step: None,
            data: centered * m.analysis.transpose(),
            geometry: patches.geometry,
        })
    }

    /// `g_s^k`: maps each latent row `y` to `S_k y + s_k`. No clamping here.
    pub fn synthesis(&self, k: Level, latent: &Latent) -> Result<PatchMatrix> {
        let m = self.level(k)?;
        if latent.level != k {
            return Err(Error::LevelMismatch {
                expected: k,
                found: latent.level,
            });
        }
        let mut rows = &latent.data * m.synthesis.transpose();
        for mut row in rows.row_iter_mut() {
            row += m.synthesis_bias.transpose();
        }
        Ok(PatchMatrix {
            geometry: latent.geometry,
            rows,
        })
    }

    /// Synthesis followed by image assembly (clamped to `[0, 1]`).
    pub fn reconstruct(&self, k: Level, latent: &Latent) -> Result<ImagePlane> {
        unpatchify(&self.synthesis(k, latent)?)
    }

    /// `Q^k` with the family's step for level `k`.
    pub fn quantize(&self, k: Level, latent: &Latent) -> Result<Latent> {
        let step = self.step(k)?;
        self.quantize_with_step(k, latent, step)
    }

    /// `Q^k` with an explicit step (used by the rate-control ladder).
    pub fn quantize_with_step(&self, k: Level, latent: &Latent, step: f64) -> Result<Latent> {
        self.level(k)?;
        if latent.level != k {
            return Err(Error::LevelMismatch {
                expected: k,
                found: latent.level,
            });
        }
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::Quantization(format!("invalid quantizer step {step}")));
        }
        if latent.step == Some(step) {
            return Ok(latent.clone());
        }
        Ok(Latent {
            level: k,
            step: Some(step),
            data: latent.data.map(|v| quantize_value(v, step)),
            geometry: latent.geometry,
        })
    }

    /// FLOPs of `g_a^k` over `n` patches: a multiply-add per matrix entry plus the bias subtraction.
    pub fn flops_analysis(&self, n: usize) -> u64 {
        let b2 = (self.patch_size * self.patch_size) as u64;
        (2 * self.latent_dim as u64 * b2 + b2) * n as u64
    }

    /// FLOPs of `g_s^k` over `n` patches: a multiply-add per matrix entry plus the bias addition.
    pub fn flops_synthesis(&self, n: usize) -> u64 {
        self.flops_analysis(n)
    }

    /// FLOPs of `Q^k` over `n` patches: a division and a multiplication per element.
    pub fn flops_quantize(&self, n: usize) -> u64 {
        2 * (self.latent_dim * n) as u64
    }
}

/// Per-component gains for a level `depth` steps below the top level.
pub fn level_gains(m: usize, depth: Level) -> DVector<f64> {
    DVector::from_fn(m, |i, _| 1.0 / (1.0 + i as f64 * f64::from(depth) / m as f64))
}

/// Mean and top-`m` eigenvectors (as columns, descending eigenvalue) of the
/// sample covariance. Signs are fixed so each column's largest-magnitude entry is positive.
pub fn principal_basis(rows: &DMatrix<f64>, m: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.nrows() as f64;
    let mean = rows.row_mean().transpose();
    let mut centered = rows.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / n;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut basis = DMatrix::zeros(rows.ncols(), m);
    for (j, &src) in order.iter().take(m).enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        let pivot = col.iter().copied().fold(0.0_f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            col = -col;
        }
        basis.set_column(j, &col);
    }
    (mean, basis)
}
