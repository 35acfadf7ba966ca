use crate::codec::Latent;
use crate::error::{Error, Result};

use super::range_coder::PROB_TOTAL;

/// Largest quantization index coded directly; larger magnitudes escape.
pub const MAX_INDEX: i64 = 255;
/// Alphabet: indices `-MAX_INDEX..=MAX_INDEX` followed by the escape symbol.
pub const ALPHABET: usize = 2 * MAX_INDEX as usize + 2;
pub const ESCAPE: usize = ALPHABET - 1;
/// Every symbol receives at least one count out of `PROB_TOTAL`, i.e. probability `2^-16`.
pub const MIN_PROB: f64 = 1.0 / PROB_TOTAL as f64;
/// Raw bits spent after an escape symbol.
pub const ESCAPE_RAW_BITS: f64 = 32.0;
pub const MIN_SCALE: f64 = 1e-6;

/// Frequency table of one latent channel under a discretized Laplacian.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelTable {
    pub scale: f64,
    cum: Vec<u32>,
}

impl ChannelTable {
    pub fn new(scale: f64, step: f64) -> Self {
        let probs = laplace_bin_probabilities(scale, step);
        let spread = f64::from(PROB_TOTAL - ALPHABET as u32);
        let mut freqs: Vec<u32> = probs.iter().map(|p| 1 + (p * spread).floor() as u32).collect();
        let used: u32 = freqs.iter().sum();
        let peak = freqs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap();
        freqs[peak] += PROB_TOTAL - used;
        let mut cum = Vec::with_capacity(ALPHABET + 1);
        cum.push(0);
        for f in freqs {
            cum.push(cum.last().unwrap() + f);
        }
        Self { scale, cum }
    }

    #[inline]
    pub fn cum(&self, symbol: usize) -> u32 {
        self.cum[symbol]
    }

    #[inline]
    pub fn freq(&self, symbol: usize) -> u32 {
        self.cum[symbol + 1] - self.cum[symbol]
    }

    pub fn pmf(&self, symbol: usize) -> f64 {
        f64::from(self.freq(symbol)) / f64::from(PROB_TOTAL)
    }

    pub fn symbol_for_target(&self, target: u32) -> usize {
        self.cum.partition_point(|&c| c <= target) - 1
    }

    /// Code length of one quantization index in bits, escapes included.
    pub fn bits(&self, index: i64) -> f64 {
        let sym = symbol_of(index);
        let raw = if sym == ESCAPE { ESCAPE_RAW_BITS } else { 0.0 };
        -self.pmf(sym).log2() + raw
    }
}

#[inline]
pub fn symbol_of(index: i64) -> usize {
    if index.abs() > MAX_INDEX {
        ESCAPE
    } else {
        (index + MAX_INDEX) as usize
    }
}

/// Probability mass of each quantization bin `[(i - 1/2) Δ, (i + 1/2) Δ]` under
/// `Laplace(0, b)`, with both tails beyond the last bin assigned to the escape symbol.
pub fn laplace_bin_probabilities(scale: f64, step: f64) -> Vec<f64> {
    let tail = |x: f64| 0.5 * (-x / scale).exp();
    let mut probs = vec![0.0; ALPHABET];
    for i in -MAX_INDEX..=MAX_INDEX {
        let p = if i == 0 {
            -(-0.5 * step / scale).exp_m1()
        } else {
            let a = (i.abs() as f64 - 0.5) * step;
            tail(a) - tail(a + step)
        };
        probs[symbol_of(i)] = p;
    }
    probs[ESCAPE] = 2.0 * tail((MAX_INDEX as f64 + 0.5) * step);
    probs
}

/// Factorized per-channel Laplacian model for one quantized latent.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelProbModel {
    pub step: f64,
    pub tables: Vec<ChannelTable>,
}

impl ChannelProbModel {
    /// Builds tables from transmitted scales. Scales are first rounded to their
    /// wire precision so both coder ends derive identical tables.
    pub fn from_scales(scales: &[f64], step: f64) -> Self {
        let tables = scales
            .iter()
            .map(|&s| ChannelTable::new(wire_scale(s), step))
            .collect();
        Self { step, tables }
    }

    pub fn scales(&self) -> Vec<f64> {
        self.tables.iter().map(|t| t.scale).collect()
    }
}

/// Decimal form of a scale as carried in the bitstream header (4 significant digits).
pub fn format_scale(scale: f64) -> String {
    format!("{scale:.3e}")
}

pub fn wire_scale(scale: f64) -> f64 {
    format_scale(scale).parse().expect("formatted float parses")
}

/// Fits `b_c = max(mean |v|, 1e-6)` per channel of a quantized latent.
pub fn fit_prob_model(latent: &Latent) -> Result<ChannelProbModel> {
    let step = latent
        .step
        .ok_or_else(|| Error::Quantization("probability model needs a quantized latent".into()))?;
    let n = latent.num_patches();
    let scales: Vec<f64> = latent
        .data
        .column_iter()
        .map(|col| {
            let mean = if n == 0 { 0.0 } else { col.iter().map(|v| v.abs()).sum::<f64>() / n as f64 };
            mean.max(MIN_SCALE)
        })
        .collect();
    Ok(ChannelProbModel::from_scales(&scales, step))
}

/// Analytic code length `Σ -log2 pmf(index)` of a quantized latent (plus raw escape bits).
pub fn estimate_rate(latent: &Latent, model: &ChannelProbModel) -> Result<f64> {
    if latent.dim() != model.tables.len() {
        return Err(Error::Quantization(format!(
            "model has {} channels, latent has {}",
            model.tables.len(),
            latent.dim()
        )));
    }
    let step = latent
        .step
        .ok_or_else(|| Error::Quantization("rate estimate needs a quantized latent".into()))?;
    Ok(latent
        .data
        .column_iter()
        .zip(&model.tables)
        .map(|(col, table)| col.iter().map(|v| table.bits((v / step).round() as i64)).sum::<f64>())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::PatchGeometry;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Exp};

    fn latent(data: DMatrix<f64>, step: f64) -> Latent {
        Latent {
            level: 1,
            step: Some(step),
            geometry: PatchGeometry {
                width: data.nrows(),
                height: 1,
                channels: 1,
                patch_size: 1,
            },
            data,
        }
    }

    #[test]
    fn pmf_normalizes_and_respects_floor() {
        for &(scale, step) in &[(1e-6, 0.015), (0.3, 0.1), (5.0, 0.01), (1.0, 1.0)] {
            let t = ChannelTable::new(scale, step);
            let total: f64 = (0..ALPHABET).map(|s| t.pmf(s)).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!((0..ALPHABET).all(|s| t.pmf(s) >= MIN_PROB));
            let exact: f64 = laplace_bin_probabilities(scale, step).iter().sum();
            assert!((exact - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_channel_concentrates_at_zero() {
        let l = latent(DMatrix::zeros(50, 1), 0.5);
        let model = fit_prob_model(&l).unwrap();
        assert_eq!(model.tables[0].scale, MIN_SCALE);
        let p0 = model.tables[0].pmf(symbol_of(0));
        assert_eq!(p0, f64::from(PROB_TOTAL - ALPHABET as u32 + 1) / f64::from(PROB_TOTAL));
    }

    #[test]
    fn symmetric_channel_fits_step_scale() {
        let data = DMatrix::from_fn(40, 1, |r, _| if r % 2 == 0 { 1.0 } else { -1.0 });
        let model = fit_prob_model(&latent(data, 1.0)).unwrap();
        assert_eq!(model.tables[0].scale, 1.0);
        assert_eq!(model.tables[0].pmf(symbol_of(1)), model.tables[0].pmf(symbol_of(-1)));
    }

    #[test]
    fn laplacian_scale_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let exp = Exp::new(1.0 / 0.8).unwrap();
        let step = 0.01;
        let data = DMatrix::from_fn(10_000, 1, |_, _| {
            let mag: f64 = exp.sample(&mut rng);
            let v = if rng.random::<bool>() { mag } else { -mag };
            step * (v / step).round()
        });
        let model = fit_prob_model(&latent(data, step)).unwrap();
        assert!((model.tables[0].scale - 0.8).abs() / 0.8 < 0.05);
    }

    #[test]
    fn unquantized_input_is_rejected() {
        let mut l = latent(DMatrix::zeros(2, 2), 1.0);
        l.step = None;
        assert!(fit_prob_model(&l).is_err());
    }

    #[test]
    fn rate_of_half_probability_symbol_is_one_bit() {
        // a table where index 0 holds exactly half the mass
        let mut t = ChannelTable::new(1.0, 1.0);
        let zero = symbol_of(0);
        let mut freqs: Vec<u32> = (0..ALPHABET).map(|s| t.freq(s)).collect();
        let rest: u32 = PROB_TOTAL / 2;
        freqs.iter_mut().for_each(|f| *f = 1);
        freqs[zero] = rest;
        freqs[symbol_of(1)] = PROB_TOTAL - rest - (ALPHABET as u32 - 2);
        let mut cum = vec![0];
        for f in freqs {
            cum.push(cum.last().unwrap() + f);
        }
        t.cum = cum;
        assert_eq!(t.bits(0), 1.0);
        let model = ChannelProbModel {
            step: 1.0,
            tables: vec![t],
        };
        assert_eq!(estimate_rate(&latent(DMatrix::zeros(1, 1), 1.0), &model).unwrap(), 1.0);
    }

    #[test]
    fn all_zero_latent_rate_is_closed_form() {
        let l = latent(DMatrix::zeros(100, 3), 0.2);
        let model = fit_prob_model(&l).unwrap();
        let expected = 300.0 * -model.tables[0].pmf(symbol_of(0)).log2();
        assert!((estimate_rate(&l, &model).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn escapes_cost_raw_bits() {
        let t = ChannelTable::new(0.1, 0.1);
        assert_eq!(t.bits(1000), -t.pmf(ESCAPE).log2() + 32.0);
        assert_eq!(symbol_of(-256), ESCAPE);
        assert_eq!(symbol_of(-255), 0);
    }
}
