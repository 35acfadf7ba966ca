//! Lossless coding of quantized latents and analytic rate estimation.

mod bitstream;
mod model;
mod range_coder;

pub use bitstream::{Bitstream, StreamHeader, STREAM_MAGIC};
pub use model::{
    estimate_rate, fit_prob_model, format_scale, laplace_bin_probabilities, symbol_of, wire_scale, ChannelProbModel,
    ChannelTable, ALPHABET, ESCAPE, ESCAPE_RAW_BITS, MAX_INDEX, MIN_PROB, MIN_SCALE,
};
pub use range_coder::{RangeDecoder, RangeEncoder, PROB_BITS, PROB_TOTAL};

use nalgebra::DMatrix;

use crate::codec::{CodecFamily, Latent};
use crate::error::{Error, Result};

/// Per-symbol cost of the coder in the FLOP model (interval update and renormalization).
pub const CODER_FLOPS_PER_SYMBOL: u64 = 6;
/// Per-element cost of fitting channel scales (absolute value and accumulate).
pub const FIT_FLOPS_PER_ELEMENT: u64 = 2;
/// Per-table-entry cost of building a channel's frequency table.
pub const TABLE_FLOPS_PER_SYMBOL: u64 = 4;

/// FLOPs to fit the probability model of an `n x m` latent.
pub fn flops_fit(n: usize, m: usize) -> u64 {
    FIT_FLOPS_PER_ELEMENT * (n * m) as u64 + TABLE_FLOPS_PER_SYMBOL * (ALPHABET * m) as u64
}

/// FLOPs to encode or decode an `n x m` latent, excluding escape payloads.
pub fn flops_code(n: usize, m: usize) -> u64 {
    CODER_FLOPS_PER_SYMBOL * (n * m) as u64
}

/// Entropy-encodes a quantized latent. The header carries everything needed to decode.
pub fn encode(latent: &Latent, model: &ChannelProbModel, version: &str) -> Result<Bitstream> {
    let step = latent
        .step
        .ok_or_else(|| Error::Quantization("cannot entropy-code an unquantized latent".into()))?;
    if model.tables.len() != latent.dim() {
        return Err(Error::Quantization(format!(
            "model has {} channels, latent has {}",
            model.tables.len(),
            latent.dim()
        )));
    }
    let mut enc = RangeEncoder::new();
    for row in latent.data.row_iter() {
        for (v, table) in row.iter().zip(&model.tables) {
            let idx = (v / step).round() as i64;
            let sym = symbol_of(idx);
            enc.encode(table.cum(sym), table.freq(sym));
            if sym == ESCAPE {
                let raw = i32::try_from(idx)
                    .map_err(|_| Error::Quantization(format!("index {idx} exceeds the escape range")))?
                    as u32;
                enc.encode(raw >> 16, 1);
                enc.encode(raw & 0xFFFF, 1);
            }
        }
    }
    Ok(Bitstream {
        header: StreamHeader {
            level: latent.level,
            version: version.to_string(),
            num_patches: latent.num_patches(),
            geometry: latent.geometry,
            step,
            scales: model.scales(),
        },
        payload: enc.finish(),
    })
}

/// Decodes a bitstream produced by [`encode`] for the same codec family.
pub fn decode(stream: &Bitstream, family: &CodecFamily) -> Result<Latent> {
    let h = &stream.header;
    if h.version != family.version() {
        return Err(Error::VersionMismatch {
            expected: family.version().to_string(),
            found: h.version.clone(),
        });
    }
    family.level(h.level)?;
    let m = family.latent_dim();
    if h.scales.len() != m {
        return Err(Error::Container(format!("header has {} scales, family expects {m}", h.scales.len())));
    }
    if h.geometry.patch_size != family.patch_size() || h.geometry.num_patches() != h.num_patches {
        return Err(Error::Container("header geometry is inconsistent".into()));
    }
    if !(h.step > 0.0 && h.step.is_finite()) {
        return Err(Error::Container(format!("invalid step {}", h.step)));
    }
    let model = ChannelProbModel::from_scales(&h.scales, h.step);
    let mut dec = RangeDecoder::new(&stream.payload);
    let mut data = DMatrix::zeros(h.num_patches, m);
    for r in 0..h.num_patches {
        for (c, table) in model.tables.iter().enumerate() {
            let sym = table.symbol_for_target(dec.target()?);
            dec.consume(table.cum(sym), table.freq(sym))?;
            let idx = if sym == ESCAPE {
                let hi = dec.target()?;
                dec.consume(hi, 1)?;
                let lo = dec.target()?;
                dec.consume(lo, 1)?;
                i64::from(((hi << 16) | lo) as i32)
            } else {
                sym as i64 - MAX_INDEX
            };
            data[(r, c)] = h.step * idx as f64;
        }
    }
    dec.finish()?;
    Ok(Latent {
        level: h.level,
        step: Some(h.step),
        data,
        geometry: h.geometry,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{CodecConfig, CodecFamily};
    use crate::image_io::{patchify, ImagePlane, PatchGeometry};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn family() -> CodecFamily {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = ImagePlane::new(32, 32, 1, (0..1024).map(|_| rng.random::<f64>()).collect()).unwrap();
        CodecFamily::from_pca(&CodecConfig::default(), &patchify(&img, 8).unwrap().rows).unwrap()
    }

    fn random_latent(rng: &mut ChaCha8Rng, n: usize, m: usize, step: f64, spread: f64) -> Latent {
        let outlier = rng.random::<f64>() < 0.2;
        let data = DMatrix::from_fn(n, m, |_, c| {
            let scale = spread / (1.0 + c as f64);
            let mut v = (rng.random::<f64>() - 0.5) * scale * 2.0;
            if outlier && rng.random::<f64>() < 0.01 {
                v *= 1e3;
            }
            step * (v / step).round()
        });
        Latent {
            level: 3,
            step: Some(step),
            data,
            geometry: PatchGeometry {
                width: 8 * n,
                height: 8,
                channels: 1,
                patch_size: 8,
            },
        }
    }

    #[test]
    fn fuzzed_roundtrip_is_lossless() {
        let fam = family();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..1000 {
            let n = rng.random_range(0..40);
            let step = fam.step(3).unwrap();
            let spread = [0.01, 0.5, 5.0][trial % 3];
            let l = random_latent(&mut rng, n, 16, step, spread);
            let model = fit_prob_model(&l).unwrap();
            let bs = encode(&l, &model, fam.version()).unwrap();
            let parsed = Bitstream::from_bytes(&bs.to_bytes()).unwrap();
            assert_eq!(parsed, bs);
            assert_eq!(decode(&parsed, &fam).unwrap(), l, "trial {trial}");
        }
    }

    #[test]
    fn empty_latent_is_header_only() {
        let fam = family();
        let l = Latent {
            level: 2,
            step: Some(0.24),
            data: DMatrix::zeros(0, 16),
            geometry: PatchGeometry {
                width: 0,
                height: 0,
                channels: 1,
                patch_size: 8,
            },
        };
        let bs = encode(&l, &fit_prob_model(&l).unwrap(), fam.version()).unwrap();
        assert!(bs.payload.is_empty());
        assert_eq!(decode(&bs, &fam).unwrap(), l);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let fam = family();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = random_latent(&mut rng, 10, 16, 0.06, 1.0);
        let bs = encode(&l, &fit_prob_model(&l).unwrap(), "deadbeef").unwrap();
        assert!(matches!(decode(&bs, &fam), Err(Error::VersionMismatch { .. })));
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let fam = family();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let l = random_latent(&mut rng, 30, 16, 0.06, 1.0);
        let mut bs = encode(&l, &fit_prob_model(&l).unwrap(), fam.version()).unwrap();
        bs.payload.pop();
        assert!(matches!(decode(&bs, &fam), Err(Error::CorruptPayload(_))));
        let mut bytes = encode(&l, &fit_prob_model(&l).unwrap(), fam.version()).unwrap().to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(Bitstream::from_bytes(&bytes), Err(Error::CorruptPayload(_))));
    }

    #[test]
    fn unquantized_latent_cannot_be_encoded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut l = random_latent(&mut rng, 3, 16, 0.1, 1.0);
        let model = fit_prob_model(&l).unwrap();
        l.step = None;
        assert!(encode(&l, &model, "v").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn payload_length_tracks_estimate(seed in any::<u64>(), n in 1usize..300, spread in 0.01f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = random_latent(&mut rng, n, 16, 0.03, spread);
            let model = fit_prob_model(&l).unwrap();
            let estimate = estimate_rate(&l, &model).unwrap();
            let bits = encode(&l, &model, "v").unwrap().payload_bits() as f64;
            prop_assert!(bits <= estimate + 64.0, "bits {} estimate {}", bits, estimate);
            prop_assert!((bits - estimate).abs() <= 0.02 * estimate + 64.0);
        }
    }
}
