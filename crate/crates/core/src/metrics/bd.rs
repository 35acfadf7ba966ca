//! Rate-distortion points, curves and Bjøntegaard deltas.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub bpp: f64,
    pub psnr: f64,
    pub msssim_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityAxis {
    Psnr,
    MsssimDb,
}

impl QualityAxis {
    pub fn of(self, p: &RDPoint) -> f64 {
        match self {
            QualityAxis::Psnr => p.psnr,
            QualityAxis::MsssimDb => p.msssim_db,
        }
    }
}

/// Points sorted by strictly increasing bpp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RDCurve {
    pub label: String,
    points: Vec<RDPoint>,
}

impl RDCurve {
    pub fn new(label: impl Into<String>, mut points: Vec<RDPoint>) -> Result<Self> {
        if points.iter().any(|p| !(p.bpp > 0.0 && p.bpp.is_finite() && p.psnr.is_finite() && p.msssim_db.is_finite())) {
            return Err(Error::Metric("RD points need positive finite bpp and finite quality".into()));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[0].bpp >= w[1].bpp) {
            return Err(Error::Metric("RD curve bitrates must be distinct".into()));
        }
        Ok(Self {
            label: label.into(),
            points,
        })
    }

    pub fn points(&self) -> &[RDPoint] {
        &self.points
    }
}

pub const MIN_BD_POINTS: usize = 4;

/// Cubic least-squares fit on a centred, scaled abscissa.
struct Cubic {
    centre: f64,
    scale: f64,
    coef: [f64; 4],
}

impl Cubic {
    fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let centre = 0.5 * (lo + hi);
        let scale = 0.5 * (hi - lo);
        if !(scale > 0.0) {
            return Err(Error::Metric("RD curve has no spread along the fitted axis".into()));
        }
        let v = DMatrix::from_fn(x.len(), 4, |r, c| ((x[r] - centre) / scale).powi(c as i32));
        let svd = v.svd(true, true);
        let sol = svd
            .solve(&DVector::from_column_slice(y), 1e-12)
            .map_err(|e| Error::Metric(format!("cubic fit failed: {e}")))?;
        Ok(Self {
            centre,
            scale,
            coef: [sol[0], sol[1], sol[2], sol[3]],
        })
    }

    /// `∫_a^b p(x) dx`
    fn integral(&self, a: f64, b: f64) -> f64 {
        let anti = |x: f64| {
            let u = (x - self.centre) / self.scale;
            self.coef
                .iter()
                .enumerate()
                .map(|(i, c)| c * u.powi(i as i32 + 1) / (i as f64 + 1.0))
                .sum::<f64>()
        };
        self.scale * (anti(b) - anti(a))
    }
}

fn axes(curve: &RDCurve, axis: QualityAxis) -> Result<(Vec<f64>, Vec<f64>)> {
    if curve.points.len() < MIN_BD_POINTS {
        return Err(Error::Metric(format!(
            "curve {:?} has {} points, BD metrics need {MIN_BD_POINTS}",
            curve.label,
            curve.points.len()
        )));
    }
    let rate = curve.points.iter().map(|p| p.bpp.log10()).collect();
    let quality = curve.points.iter().map(|p| axis.of(p)).collect();
    Ok((rate, quality))
}

fn overlap(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    let min_a = a.iter().copied().fold(f64::INFINITY, f64::min);
    let max_a = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min_b = b.iter().copied().fold(f64::INFINITY, f64::min);
    let max_b = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = (min_a.max(min_b), max_a.min(max_b));
    if !(hi > lo) {
        return Err(Error::Metric(format!("curves do not overlap ({lo} .. {hi})")));
    }
    Ok((lo, hi))
}

/// Average bitrate change of `test` relative to `reference` at equal quality, in percent.
pub fn bd_rate(reference: &RDCurve, test: &RDCurve, axis: QualityAxis) -> Result<f64> {
    let (r_rate, r_q) = axes(reference, axis)?;
    let (t_rate, t_q) = axes(test, axis)?;
    let (lo, hi) = overlap(&r_q, &t_q)?;
    let r = Cubic::fit(&r_q, &r_rate)?;
    let t = Cubic::fit(&t_q, &t_rate)?;
    let diff = (t.integral(lo, hi) - r.integral(lo, hi)) / (hi - lo);
    Ok(100.0 * (10f64.powf(diff) - 1.0))
}

/// Average quality change of `test` relative to `reference` at equal bitrate, in dB.
pub fn bd_quality(reference: &RDCurve, test: &RDCurve, axis: QualityAxis) -> Result<f64> {
    let (r_rate, r_q) = axes(reference, axis)?;
    let (t_rate, t_q) = axes(test, axis)?;
    let (lo, hi) = overlap(&r_rate, &t_rate)?;
    let r = Cubic::fit(&r_rate, &r_q)?;
    let t = Cubic::fit(&t_rate, &t_q)?;
    Ok((t.integral(lo, hi) - r.integral(lo, hi)) / (hi - lo))
}
