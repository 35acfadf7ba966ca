//! Kozachenko–Leonenko nearest-neighbour differential entropy, in bits.

use std::f64::consts::{LN_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::{PolicyVector, ProbeRecord};
use crate::codec::{Latent, Level};
use crate::error::{Error, Result};

pub const DEFAULT_NEIGHBOR: usize = 3;
/// Jitter on continuous snapshots, relative to half a quantizer bin.
pub const TIE_JITTER: f64 = 1e-3;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// `ψ(n)` for a positive integer.
pub fn digamma_int(n: usize) -> f64 {
    assert!(n > 0, "digamma of 0");
    -EULER_GAMMA + (1..n).map(|j| 1.0 / j as f64).sum::<f64>()
}

/// `ln` of the volume of the unit Euclidean ball in `dim` dimensions.
pub fn ln_unit_ball(dim: usize) -> f64 {
    // V_0 = 1, V_1 = 2, V_d = V_{d-2} · 2π / d
    let mut v = if dim.is_multiple_of(2) { 0.0 } else { LN_2 };
    let mut d = if dim.is_multiple_of(2) { 2 } else { 3 };
    while d <= dim {
        v += (2.0 * PI / d as f64).ln();
        d += 2;
    }
    v
}

fn assemble(n: usize, k: usize, dim: usize, log_dist_sum: f64) -> f64 {
    let nats = digamma_int(n) - digamma_int(k) + ln_unit_ball(dim) + dim as f64 * log_dist_sum / n as f64;
    nats / LN_2
}

fn check_count(n: usize, k: usize) -> Result<()> {
    if k == 0 || n < k + 1 {
        return Err(Error::Metric(format!("entropy estimate with k = {k} needs more than {k} samples, got {n}")));
    }
    Ok(())
}

/// Estimate for scalar samples. Errors if any sample has a zero `k`-th neighbour distance.
pub fn kl_entropy(samples: &[f64], k: usize) -> Result<f64> {
    let n = samples.len();
    check_count(n, k)?;
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::Metric("non-finite entropy sample".into()));
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let mut log_sum = 0.0;
    for i in 0..n {
        // merge outward from i until k neighbours are taken
        let (mut l, mut r) = (i, i + 1);
        let mut dist = 0.0;
        for _ in 0..k {
            let dl = if l > 0 { xs[i] - xs[l - 1] } else { f64::INFINITY };
            let dr = if r < n { xs[r] - xs[i] } else { f64::INFINITY };
            if dl <= dr {
                dist = dl;
                l -= 1;
            } else {
                dist = dr;
                r += 1;
            }
        }
        if dist <= 0.0 {
            return Err(Error::Metric("samples collapse onto duplicates; entropy undefined".into()));
        }
        log_sum += dist.ln();
    }
    Ok(assemble(n, k, 1, log_sum))
}

/// Estimate for vector samples by exhaustive neighbour search.
pub fn kl_entropy_vectors(samples: &[Vec<f64>], k: usize) -> Result<f64> {
    let n = samples.len();
    check_count(n, k)?;
    let dim = samples[0].len();
    if dim == 0 || samples.iter().any(|s| s.len() != dim) {
        return Err(Error::Metric("entropy samples must share a positive dimension".into()));
    }
    let mut log_sum = 0.0;
    let mut dists = Vec::with_capacity(n - 1);
    for (i, a) in samples.iter().enumerate() {
        dists.clear();
        dists.extend(samples.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, b)| {
            a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>()
        }));
        let (_, kth, _) = dists.select_nth_unstable_by(k - 1, f64::total_cmp);
        if *kth <= 0.0 {
            return Err(Error::Metric("samples collapse onto duplicates; entropy undefined".into()));
        }
        log_sum += 0.5 * kth.ln();
    }
    Ok(assemble(n, k, dim, log_sum))
}

/// Adds `U(-half_width, half_width)` noise.
pub fn jitter(samples: &[f64], half_width: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    samples
        .iter()
        .map(|v| v + half_width * (2.0 * rng.random::<f64>() - 1.0))
        .collect()
}

/// Sum over channels of per-channel scalar estimates, each channel jittered by `half_width`.
pub fn latent_entropy(latent: &Latent, k: usize, half_width: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut total = 0.0;
    for col in latent.data.column_iter() {
        let v: Vec<f64> = col.iter().copied().collect();
        total += kl_entropy(&jitter(&v, half_width, rng), k)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyRow {
    pub level: Level,
    pub pre_bits: f64,
    /// Present at quantization points only.
    pub post_bits: Option<f64>,
    pub increment: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyTrace {
    pub policy: String,
    /// Descending level.
    pub rows: Vec<EntropyRow>,
}

impl EntropyTrace {
    pub fn total_increment(&self) -> f64 {
        self.rows.iter().filter_map(|r| r.increment).sum()
    }
}

/// Entropy of every probed state; at quantization points also of the quantized state.
///
/// Continuous snapshots get a tiny tie-breaking jitter. Quantized snapshots are
/// dithered over the full bin, which makes the estimate that of the
/// piecewise-uniform density implied by the quantizer.
pub fn entropy_trace(probes: &[ProbeRecord], policy: &PolicyVector, k: usize, seed: u64) -> Result<EntropyTrace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for level in policy.levels() {
        let probe = probes
            .iter()
            .find(|p| p.level == level)
            .ok_or_else(|| Error::Metric(format!("no probe recorded at level {level}")))?;
        let step = probe.quantized.step.expect("probe latents are quantized");
        let pre = latent_entropy(&probe.unquantized, k, 0.5 * step * TIE_JITTER, &mut rng)?;
        let post = if probe.quantization_point {
            Some(latent_entropy(&probe.quantized, k, 0.5 * step, &mut rng)?)
        } else {
            None
        };
        rows.push(EntropyRow {
            level,
            pre_bits: pre,
            post_bits: post,
            increment: post.map(|p| p - pre),
        });
    }
    Ok(EntropyTrace {
        policy: policy.literal(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn digamma_values() {
        assert!((digamma_int(1) + EULER_GAMMA).abs() < 1e-15);
        assert!((digamma_int(3) - (1.5 - EULER_GAMMA)).abs() < 1e-15);
    }

    #[test]
    fn unit_ball_volumes() {
        assert_eq!(ln_unit_ball(1), LN_2);
        assert!((ln_unit_ball(2) - PI.ln()).abs() < 1e-15);
        assert!((ln_unit_ball(3) - (4.0 * PI / 3.0).ln()).abs() < 1e-14);
        assert!((ln_unit_ball(4) - (PI * PI / 2.0).ln()).abs() < 1e-14);
    }

    #[test]
    fn scalar_and_vector_paths_agree_in_one_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..400).map(|_| StandardNormal.sample(&mut rng)).collect();
        let vs: Vec<Vec<f64>> = xs.iter().map(|&v| vec![v]).collect();
        let a = kl_entropy(&xs, 3).unwrap();
        let b = kl_entropy_vectors(&vs, 3).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} {b}");
    }

    #[test]
    fn duplicates_and_tiny_inputs_error() {
        assert!(kl_entropy(&[1.0; 10], 3).is_err());
        assert!(kl_entropy(&[1.0, 2.0, 3.0], 3).is_err());
        assert!(kl_entropy(&[0.1, 0.5, 0.9, 1.3], 3).is_ok());
    }

    #[test]
    fn gaussian_pair_in_two_dimensions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vs: Vec<Vec<f64>> = (0..3000)
            .map(|_| vec![StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)])
            .collect();
        let expected = (2.0 * PI * std::f64::consts::E).ln() / LN_2;
        assert!((kl_entropy_vectors(&vs, 3).unwrap() - expected).abs() < 0.1);
    }
}
