//! Binary PGM/PPM I/O and conversion between image planes and patch matrices.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseError, Result};

/// An image with samples in `[0, 1]`, interleaved by channel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<f64>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, channels: usize, samples: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Geometry(format!("unsupported channel count {channels}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::Geometry("empty image".into()));
        }
        if samples.len() != width * height * channels {
            return Err(Error::Geometry(format!(
                "{} samples for {width}x{height}x{channels}",
                samples.len()
            )));
        }
        if let Some(v) = samples.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Geometry(format!("sample {v} outside [0,1]")));
        }
        Ok(Self {
            width,
            height,
            channels,
            samples,
        })
    }

    /// Builds a plane from arbitrary reals, clamping them into `[0, 1]`.
    pub fn from_clamped(width: usize, height: usize, channels: usize, samples: Vec<f64>) -> Result<Self> {
        let samples = samples.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(width, height, channels, samples)
    }

    pub fn from_bytes(width: usize, height: usize, channels: usize, bytes: &[u8]) -> Result<Self> {
        let samples = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(width, height, channels, samples)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height * self.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.samples[(y * self.width + x) * self.channels + c]
    }

    /// Extracts one channel as a `width * height` row-major vector.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.samples
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    /// 8-bit representation, round-half-up after clamping.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.samples.iter().map(|&v| to_byte(v)).collect()
    }
}

#[inline]
pub fn to_byte(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.data.len() {
            match self.data[self.pos] {
                b'#' => {
                    while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &'static str) -> Result<u64, ParseError> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.data.len() && self.data[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(ParseError::MalformedHeader {
                offset: start,
                reason: what,
            });
        }
        std::str::from_utf8(&self.data[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(ParseError::MalformedHeader {
                offset: start,
                reason: what,
            })
    }
}

/// Decodes a binary PGM (P5) or PPM (P6) with maxval 255.
pub fn decode_netpbm(data: &[u8]) -> Result<ImagePlane, ParseError> {
    let channels = match data.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(ParseError::BadMagic { offset: 0 }),
    };
    let mut cur = Cursor { data, pos: 2 };
    if !data.get(2).is_some_and(|c| c.is_ascii_whitespace() || *c == b'#') {
        return Err(ParseError::MalformedHeader {
            offset: 2,
            reason: "missing whitespace after magic",
        });
    }
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval_offset = {
        cur.skip_whitespace_and_comments();
        cur.pos
    };
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(ParseError::UnsupportedMaxval {
            offset: maxval_offset,
            maxval,
        });
    }
    if width == 0 || height == 0 {
        return Err(ParseError::MalformedHeader {
            offset: maxval_offset,
            reason: "zero dimension",
        });
    }
    // exactly one whitespace byte separates the header from the raster
    match data.get(cur.pos) {
        Some(c) if c.is_ascii_whitespace() => cur.pos += 1,
        _ => {
            return Err(ParseError::MalformedHeader {
                offset: cur.pos,
                reason: "missing whitespace after maxval",
            })
        }
    }
    let expected = width * height * channels;
    let payload = &data[cur.pos..];
    if payload.len() < expected {
        return Err(ParseError::TruncatedPayload {
            offset: cur.pos,
            expected,
            found: payload.len(),
        });
    }
    let samples = payload[..expected].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(ImagePlane {
        width,
        height,
        channels,
        samples,
    })
}

/// Encodes a plane as P5 or P6 with a canonical `P5\n<w> <h>\n255\n` header.
pub fn encode_netpbm(plane: &ImagePlane) -> Vec<u8> {
    let magic = if plane.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", plane.width, plane.height).into_bytes();
    out.extend(plane.to_bytes());
    out
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_netpbm(&data).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_image(plane: &ImagePlane, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_netpbm(plane)).map_err(|e| Error::io(path, e))
}

/// Geometry needed to reassemble patches into an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGeometry {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub patch_size: usize,
}

impl PatchGeometry {
    pub fn blocks_x(&self) -> usize {
        self.width.div_ceil(self.patch_size)
    }

    pub fn blocks_y(&self) -> usize {
        self.height.div_ceil(self.patch_size)
    }

    pub fn padded_width(&self) -> usize {
        self.blocks_x() * self.patch_size
    }

    pub fn padded_height(&self) -> usize {
        self.blocks_y() * self.patch_size
    }

    pub fn patches_per_channel(&self) -> usize {
        self.blocks_x() * self.blocks_y()
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_channel() * self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height * self.channels
    }
}

/// Non-overlapping `B x B` blocks, one flattened block per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    pub geometry: PatchGeometry,
    pub rows: DMatrix<f64>,
}

impl PatchMatrix {
    pub fn num_patches(&self) -> usize {
        self.rows.nrows()
    }

    pub fn patch_size(&self) -> usize {
        self.geometry.patch_size
    }
}

/// Splits a plane into edge-replicate padded `B x B` patches, channel by channel.
pub fn patchify(plane: &ImagePlane, patch_size: usize) -> Result<PatchMatrix> {
    if patch_size == 0 {
        return Err(Error::Geometry("patch size must be >= 1".into()));
    }
    let geometry = PatchGeometry {
        width: plane.width,
        height: plane.height,
        channels: plane.channels,
        patch_size,
    };
    let b = patch_size;
    let mut rows = DMatrix::zeros(geometry.num_patches(), b * b);
    let mut r = 0;
    for c in 0..plane.channels {
        for by in 0..geometry.blocks_y() {
            for bx in 0..geometry.blocks_x() {
                for py in 0..b {
                    let y = (by * b + py).min(plane.height - 1);
                    for px in 0..b {
                        let x = (bx * b + px).min(plane.width - 1);
                        rows[(r, py * b + px)] = plane.get(x, y, c);
                    }
                }
                r += 1;
            }
        }
    }
    Ok(PatchMatrix { geometry, rows })
}

/// Reassembles patches into a plane, cropping the padding. Samples are clamped to `[0, 1]`.
pub fn unpatchify(patches: &PatchMatrix) -> Result<ImagePlane> {
    let g = patches.geometry;
    if g.patch_size == 0 || g.width == 0 || g.height == 0 {
        return Err(Error::Geometry("degenerate patch geometry".into()));
    }
    let b = g.patch_size;
    if patches.rows.nrows() != g.num_patches() || patches.rows.ncols() != b * b {
        return Err(Error::Geometry(format!(
            "{}x{} patch matrix inconsistent with {}x{}x{} image at B={b}",
            patches.rows.nrows(),
            patches.rows.ncols(),
            g.width,
            g.height,
            g.channels
        )));
    }
    let mut samples = vec![0.0; g.pixel_count()];
    let mut r = 0;
    for c in 0..g.channels {
        for by in 0..g.blocks_y() {
            for bx in 0..g.blocks_x() {
                for py in 0..b {
                    let y = by * b + py;
                    if y >= g.height {
                        break;
                    }
                    for px in 0..b {
                        let x = bx * b + px;
                        if x >= g.width {
                            break;
                        }
                        samples[(y * g.width + x) * g.channels + c] = patches.rows[(r, py * b + px)];
                    }
                }
                r += 1;
            }
        }
    }
    ImagePlane::from_clamped(g.width, g.height, g.channels, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gray(w: usize, h: usize, f: impl Fn(usize, usize) -> u8) -> ImagePlane {
        let bytes: Vec<u8> = (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        ImagePlane::from_bytes(w, h, 1, &bytes).unwrap()
    }

    #[test]
    fn decodes_p5_payload() {
        let mut data = b"P5 2 2 255\n".to_vec();
        data.extend([0, 255, 128, 64]);
        let img = decode_netpbm(&data).unwrap();
        assert_eq!(img.samples(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn skips_comments() {
        let mut data = b"P5\n# made by hand\n2 1\n# max\n255\n".to_vec();
        data.extend([10, 20]);
        let img = decode_netpbm(&data).unwrap();
        assert_eq!(img.to_bytes(), vec![10, 20]);
    }

    #[test]
    fn truncated_payload_is_reported() {
        let mut data = b"P5 2 2 255\n".to_vec();
        data.extend([1, 2, 3]);
        assert_eq!(
            decode_netpbm(&data),
            Err(ParseError::TruncatedPayload {
                offset: 11,
                expected: 4,
                found: 3
            })
        );
    }

    #[test]
    fn rejects_bad_headers() {
        assert_eq!(decode_netpbm(b"P3 1 1 255\n\0"), Err(ParseError::BadMagic { offset: 0 }));
        assert!(matches!(
            decode_netpbm(b"P5 1 1 65535\n\0\0"),
            Err(ParseError::UnsupportedMaxval { offset: 7, maxval: 65535 })
        ));
        assert!(matches!(
            decode_netpbm(b"P5 x 1 255\n\0"),
            Err(ParseError::MalformedHeader { offset: 3, .. })
        ));
    }

    #[test]
    fn save_rounds_and_clamps() {
        let half = ImagePlane::new(2, 2, 1, vec![0.5; 4]).unwrap();
        assert_eq!(half.to_bytes(), vec![128; 4]);
        let wild = ImagePlane::from_clamped(2, 1, 1, vec![1.2, -0.1]).unwrap();
        assert_eq!(wild.to_bytes(), vec![255, 0]);
        assert_eq!(to_byte(1.2), 255);
        assert_eq!(to_byte(-0.1), 0);
    }

    #[test]
    fn file_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let mut data = b"P5\n3 2\n255\n".to_vec();
        data.extend([0, 1, 2, 250, 254, 255]);
        fs::write(&path, &data).unwrap();
        let img = load_image(&path).unwrap();
        let out = dir.path().join("b.pgm");
        save_image(&img, &out).unwrap();
        assert_eq!(fs::read(&out).unwrap(), data);
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_image("/nonexistent/x.pgm").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.pgm"));
    }

    #[test]
    fn single_patch_equals_flattened_plane() {
        let img = gray(4, 4, |x, y| (x * 16 + y) as u8);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.num_patches(), 1);
        let flat: Vec<f64> = p.rows.row(0).iter().copied().collect();
        assert_eq!(flat, img.samples());
        assert_eq!(unpatchify(&p).unwrap(), img);
    }

    #[test]
    fn edge_replicate_padding() {
        let img = gray(5, 4, |x, y| (x * 10 + y) as u8);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.num_patches(), 2);
        for py in 0..4 {
            for px in 0..4 {
                assert_eq!(p.rows[(1, py * 4 + px)], img.get(4, py, 0));
            }
        }
    }

    #[test]
    fn inconsistent_geometry_is_rejected() {
        let img = gray(4, 4, |x, _| x as u8);
        let mut p = patchify(&img, 4).unwrap();
        p.geometry.width = 9;
        assert!(matches!(unpatchify(&p), Err(Error::Geometry(_))));
    }

    fn plane_strategy() -> impl Strategy<Value = ImagePlane> {
        (1usize..20, 1usize..20, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(w, h, c)| {
            proptest::collection::vec(any::<u8>(), w * h * c)
                .prop_map(move |bytes| ImagePlane::from_bytes(w, h, c, &bytes).unwrap())
        })
    }

    proptest! {
        #[test]
        fn patch_roundtrip_is_exact(img in plane_strategy(), b in prop_oneof![Just(2usize), Just(4), Just(8), Just(16)]) {
            let p = patchify(&img, b).unwrap();
            prop_assert_eq!(p.num_patches(), img.width().div_ceil(b) * img.height().div_ceil(b) * img.channels());
            prop_assert_eq!(unpatchify(&p).unwrap(), img);
        }

        #[test]
        fn load_save_load_is_idempotent(img in plane_strategy()) {
            let once = decode_netpbm(&encode_netpbm(&img)).unwrap();
            let twice = decode_netpbm(&encode_netpbm(&once)).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(encode_netpbm(&once), encode_netpbm(&img));
        }
    }
}
