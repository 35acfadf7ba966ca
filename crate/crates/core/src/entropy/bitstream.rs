//! Self-describing bitstream container.
//!
//! On-disk layout: `HCB1`, a JSON header, the payload length as a little-endian
//! `u64`, then the payload bytes. Reals in the header travel as decimal strings.

use serde::{Deserialize, Serialize};

use crate::codec::Level;
use crate::error::{Error, Result};
use crate::image_io::PatchGeometry;

pub const STREAM_MAGIC: &[u8; 4] = b"HCB1";

#[derive(Debug, Clone, PartialEq)]
pub struct StreamHeader {
    pub level: Level,
    pub version: String,
    pub num_patches: usize,
    pub geometry: PatchGeometry,
    pub step: f64,
    pub scales: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireHeader {
    level: Level,
    version: String,
    num_patches: usize,
    geometry: PatchGeometry,
    step: String,
    scales: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub header: StreamHeader,
    pub payload: Vec<u8>,
}

fn parse_real(s: &str, what: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Container(format!("{what} is not a decimal number: {s:?}")))
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let wire = WireHeader {
            level: self.header.level,
            version: self.header.version.clone(),
            num_patches: self.header.num_patches,
            geometry: self.header.geometry,
            step: format!("{}", self.header.step),
            scales: self.header.scales.iter().map(|&s| super::model::format_scale(s)).collect(),
        };
        let json = serde_json::to_vec(&wire).expect("header serializes");
        let mut out = Vec::with_capacity(4 + json.len() + 8 + self.payload.len());
        out.extend_from_slice(STREAM_MAGIC);
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        if data.get(..4) != Some(STREAM_MAGIC) {
            return Err(Error::Container("missing HCB1 magic".into()));
        }
        let mut stream = serde_json::Deserializer::from_slice(&data[4..]).into_iter::<WireHeader>();
        let wire = stream
            .next()
            .ok_or_else(|| Error::Container("missing stream header".into()))?
            .map_err(|e| Error::Container(format!("stream header: {e}")))?;
        let mut pos = 4 + stream.byte_offset();
        let len_bytes: [u8; 8] = data
            .get(pos..pos + 8)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::CorruptPayload("missing payload length".into()))?;
        pos += 8;
        let len = u64::from_le_bytes(len_bytes) as usize;
        let payload = data.get(pos..).unwrap_or_default();
        if payload.len() != len {
            return Err(Error::CorruptPayload(format!(
                "declared {len} payload bytes, found {}",
                payload.len()
            )));
        }
        let header = StreamHeader {
            level: wire.level,
            version: wire.version,
            num_patches: wire.num_patches,
            geometry: wire.geometry,
            step: parse_real(&wire.step, "step")?,
            scales: wire
                .scales
                .iter()
                .map(|s| parse_real(s, "scale"))
                .collect::<Result<_>>()?,
        };
        Ok(Self {
            header,
            payload: payload.to_vec(),
        })
    }

    /// Total serialized size in bits, header and payload included.
    pub fn size_bits(&self) -> u64 {
        self.to_bytes().len() as u64 * 8
    }

    pub fn payload_bits(&self) -> u64 {
        self.payload.len() as u64 * 8
    }
}
