//! Rate-quality sensitivity index of a quantization policy.
//!
//! For a policy `π`, the index averages two rate-quality slopes: one against
//! the minimal-quantization reference `π_*` and one against the
//! maximal-quantization reference `π^*`. Lower is better.

use serde::{Deserialize, Serialize};

use crate::cascade::ProbeRecord;
use crate::codec::Level;
use crate::error::{Error, Result};
use crate::image_io::ImagePlane;

use super::quality::{msssim_db, psnr};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RqsiMetric {
    Psnr,
    /// MS-SSIM in its dB form.
    MsSsim,
}

impl RqsiMetric {
    pub fn eval(self, x: &ImagePlane, y: &ImagePlane) -> Result<f64> {
        match self {
            RqsiMetric::Psnr => psnr(x, y),
            RqsiMetric::MsSsim => msssim_db(x, y),
        }
    }
}

/// Quality and rate (total bits) at levels `d + 1` and `d` for one policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelPair {
    pub quality_upper: f64,
    pub quality_dest: f64,
    pub rate_upper: f64,
    pub rate_dest: f64,
}

impl LevelPair {
    /// Reads the `d + 1` and `d` probes of a cascade run.
    pub fn from_probes(image: &ImagePlane, probes: &[ProbeRecord], dest: Level, metric: RqsiMetric) -> Result<Self> {
        let find = |level: Level| {
            probes
                .iter()
                .find(|p| p.level == level)
                .ok_or_else(|| Error::Metric(format!("no probe recorded at level {level}")))
        };
        let upper = find(dest + 1)?;
        let lower = find(dest)?;
        Ok(Self {
            quality_upper: metric.eval(image, &upper.reconstruction)?,
            quality_dest: metric.eval(image, &lower.reconstruction)?,
            rate_upper: upper.rate_bits,
            rate_dest: lower.rate_bits,
        })
    }
}

/// `|M(x̂^{d+1}_{π2}) − M(x̂^d_{π1})| / max(|R(ŷ^{d+1}_{π2}) − R(ŷ^d_{π1})|, ε)`
pub fn rqs(pi1: &LevelPair, pi2: &LevelPair, epsilon: f64) -> f64 {
    let dq = (pi2.quality_upper - pi1.quality_dest).abs();
    let dr = (pi2.rate_upper - pi1.rate_dest).abs();
    dq / dr.max(epsilon)
}

/// `η(π) = ½ (RQS(π, π_*) + RQS(π, π^*))`
pub fn rqsi(policy: &LevelPair, minimal: &LevelPair, maximal: &LevelPair, epsilon: f64) -> f64 {
    0.5 * (rqs(policy, minimal, epsilon) + rqs(policy, maximal, epsilon))
}
