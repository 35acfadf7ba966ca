//! `HCF1` model files: a codec family plus its module bank.
//!
//! Layout: `HCF1`, header length as little-endian `u64`, a JSON header with
//! shapes and scalars, then every matrix and vector as little-endian `f64`,
//! row-major, in header order. Writing the same model twice gives identical bytes.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::{ModuleBank, ModuleKind, TransformModule};
use crate::codec::{CodecFamily, Level, LevelModel};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"HCF1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    patch_size: usize,
    latent_dim: usize,
    version: String,
    /// SHA-256 prefix of the array section.
    digest: String,
    levels: Vec<LevelHeader>,
    modules: Vec<ModuleHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LevelHeader {
    level: Level,
    lambda: f64,
    quant_step: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModuleHeader {
    kind: String,
    from_level: Level,
}

fn push_matrix(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
}

fn push_vector(out: &mut Vec<u8>, v: &DVector<f64>) {
    for x in v.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn values(&mut self, count: usize) -> Result<Vec<f64>> {
        let end = self.pos + count * 8;
        let bytes = self
            .data
            .get(self.pos..end)
            .ok_or_else(|| Error::Container(format!("model arrays truncated at byte {}", self.data.len())))?;
        self.pos = end;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        Ok(DMatrix::from_row_slice(rows, cols, &self.values(rows * cols)?))
    }

    fn vector(&mut self, len: usize) -> Result<DVector<f64>> {
        Ok(DVector::from_vec(self.values(len)?))
    }
}

fn digest(arrays: &[u8]) -> String {
    Sha256::digest(arrays)[..16].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn model_to_bytes(family: &CodecFamily, bank: &ModuleBank) -> Vec<u8> {
    let mut arrays = Vec::new();
    for l in family.levels() {
        push_matrix(&mut arrays, &l.analysis);
        push_vector(&mut arrays, &l.analysis_bias);
        push_matrix(&mut arrays, &l.synthesis);
        push_vector(&mut arrays, &l.synthesis_bias);
    }
    for m in bank.modules() {
        push_matrix(&mut arrays, &m.weight);
        push_vector(&mut arrays, &m.bias);
    }
    let header = Header {
        digest: digest(&arrays),
        patch_size: family.patch_size(),
        latent_dim: family.latent_dim(),
        version: family.version().to_string(),
        levels: family
            .levels()
            .map(|l| LevelHeader {
                level: l.level,
                lambda: l.lambda,
                quant_step: l.quant_step,
            })
            .collect(),
        modules: bank
            .modules()
            .map(|m| ModuleHeader {
                kind: m.kind.name().to_string(),
                from_level: m.from_level,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("model header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&arrays);
    out
}

pub fn model_from_bytes(data: &[u8]) -> Result<(CodecFamily, ModuleBank)> {
    if data.get(..4) != Some(MODEL_MAGIC) {
        return Err(Error::Container("missing HCF1 magic".into()));
    }
    let len = data
        .get(4..12)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize)
        .ok_or_else(|| Error::Container("missing header length".into()))?;
    let json = data
        .get(12..12 + len)
        .ok_or_else(|| Error::Container("model header truncated".into()))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::Container(format!("model header: {e}")))?;
    if digest(&data[12 + len..]) != header.digest {
        return Err(Error::Container("model arrays do not match their digest".into()));
    }
    let (b2, m) = (header.patch_size * header.patch_size, header.latent_dim);
    let mut r = Reader { data, pos: 12 + len };
    let mut levels = Vec::with_capacity(header.levels.len());
    for l in &header.levels {
        levels.push(LevelModel {
            level: l.level,
            lambda: l.lambda,
            quant_step: l.quant_step,
            analysis: r.matrix(m, b2)?,
            analysis_bias: r.vector(b2)?,
            synthesis: r.matrix(b2, m)?,
            synthesis_bias: r.vector(b2)?,
        });
    }
    let mut bank = ModuleBank::new();
    for h in &header.modules {
        let kind = match h.kind.as_str() {
            "inter" => ModuleKind::Inter,
            "intra" => ModuleKind::Intra,
            other => return Err(Error::Container(format!("unknown module kind {other:?}"))),
        };
        let weight = r.matrix(m, m)?;
        let bias = r.vector(m)?;
        bank.insert(TransformModule::new(kind, h.from_level, weight, bias)?);
    }
    if r.pos != data.len() {
        return Err(Error::Container(format!("{} trailing bytes after model arrays", data.len() - r.pos)));
    }
    let family = CodecFamily::new(header.patch_size, m, levels)?;
    if family.version() != header.version {
        return Err(Error::VersionMismatch {
            expected: header.version,
            found: family.version().to_string(),
        });
    }
    Ok((family, bank))
}

pub fn save_model(path: impl AsRef<Path>, family: &CodecFamily, bank: &ModuleBank) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_bytes(family, bank)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(CodecFamily, ModuleBank)> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::image_io::{patchify, ImagePlane};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> (CodecFamily, ModuleBank) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = ImagePlane::new(48, 48, 1, (0..48 * 48).map(|_| rng.random()).collect()).unwrap();
        let fam = CodecFamily::from_pca(&CodecConfig::default(), &patchify(&img, 8).unwrap().rows).unwrap();
        let mut bank = ModuleBank::new();
        for k in 2..=6 {
            for kind in [ModuleKind::Inter, ModuleKind::Intra] {
                let w = DMatrix::from_fn(16, 16, |_, _| rng.random::<f64>() - 0.5);
                let b = DVector::from_fn(16, |_, _| rng.random::<f64>());
                bank.insert(TransformModule::new(kind, k, w, b).unwrap());
            }
        }
        (fam, bank)
    }

    #[test]
    fn roundtrip_is_exact_and_stable() {
        let (fam, bank) = model();
        let bytes = model_to_bytes(&fam, &bank);
        let (f2, b2) = model_from_bytes(&bytes).unwrap();
        assert_eq!(f2, fam);
        assert_eq!(b2, bank);
        assert_eq!(model_to_bytes(&f2, &b2), bytes);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let (fam, bank) = model();
        let bytes = model_to_bytes(&fam, &bank);
        assert!(model_from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(model_from_bytes(&longer).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(model_from_bytes(&bad).is_err());
        let mut tampered = bytes.clone();
        let at = tampered.len() - 8 * 300;
        tampered[at] ^= 1;
        assert!(matches!(model_from_bytes(&tampered), Err(Error::Container(_))));
    }

    #[test]
    fn file_roundtrip() {
        let (fam, bank) = model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.hcf");
        save_model(&path, &fam, &bank).unwrap();
        assert_eq!(load_model(&path).unwrap().0, fam);
        let err = load_model(dir.path().join("none.hcf")).unwrap_err();
        assert!(err.to_string().contains("none.hcf"));
    }
}
