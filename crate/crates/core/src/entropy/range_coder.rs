//! Carry-less range coder over a 64-bit state with 16-bit frequency tables.
//!
//! The encoder never propagates carries: when the interval straddles a
//! top-byte boundary while too narrow, it is truncated to the boundary. The
//! final flush emits only the bytes needed to pin a value inside the last
//! interval; the decoder reads zeros past the end and checks that exactly that
//! many bytes were present. A minimal flush makes most prefixes of a stream
//! valid streams themselves, so non-empty streams end with a 16-bit sentinel
//! symbol that a truncated stream is unlikely to reproduce.

use crate::error::{Error, Result};

pub const PROB_BITS: u32 = 16;
pub const PROB_TOTAL: u32 = 1 << PROB_BITS;

const TOP: u64 = 1 << 56;
const BOT: u64 = 1 << 40;
const SENTINEL: u32 = 0xA5C3;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
    symbols: usize,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u64::MAX,
            out: Vec::new(),
            symbols: 0,
        }
    }

    /// Encodes the symbol occupying `[cum, cum + freq)` of a `PROB_TOTAL` table.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= PROB_TOTAL);
        let r = self.range >> PROB_BITS;
        self.low = self.low.wrapping_add(r * u64::from(cum));
        self.range = r * u64::from(freq);
        self.symbols += 1;
        self.normalize();
    }

    fn normalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        if self.symbols > 0 {
            self.encode(SENTINEL, 1);
        }
        let (value, bytes) = flush_value(self.low, self.range);
        self.out.extend(value.to_be_bytes().iter().take(bytes));
        self.out
    }
}

/// Smallest number of leading bytes of a value in `[low, low + range)` whose
/// remaining bytes are zero.
fn flush_value(low: u64, range: u64) -> (u64, usize) {
    for zero_bytes in (0..=8u32).rev() {
        let unit = 1u128 << (8 * zero_bytes);
        let v = u128::from(low).div_ceil(unit) * unit;
        if v - u128::from(low) < u128::from(range) {
            return (v as u64, 8 - zero_bytes as usize);
        }
    }
    unreachable!("range is never zero")
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    shifts: usize,
    low: u64,
    range: u64,
    code: u64,
    scale: u64,
    symbols: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut dec = Self {
            data,
            pos: 0,
            shifts: 0,
            low: 0,
            range: u64::MAX,
            code: 0,
            scale: 0,
            symbols: 0,
        };
        for _ in 0..8 {
            dec.code = (dec.code << 8) | u64::from(dec.next_byte());
        }
        dec
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.data.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Returns the cumulative-frequency target of the next symbol.
    pub fn target(&mut self) -> Result<u32> {
        self.scale = self.range >> PROB_BITS;
        let v = self.code.wrapping_sub(self.low) / self.scale;
        if v >= u64::from(PROB_TOTAL) {
            return Err(Error::CorruptPayload("code value outside the coding interval".into()));
        }
        Ok(v as u32)
    }

    /// Consumes the symbol `[cum, cum + freq)` found via [`RangeDecoder::target`].
    pub fn consume(&mut self, cum: u32, freq: u32) -> Result<()> {
        self.low = self.low.wrapping_add(self.scale * u64::from(cum));
        self.range = self.scale * u64::from(freq);
        self.symbols += 1;
        if self.code.wrapping_sub(self.low) >= self.range {
            return Err(Error::CorruptPayload("decoder state left the coding interval".into()));
        }
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | u64::from(self.next_byte());
            self.low <<= 8;
            self.range <<= 8;
            self.shifts += 1;
        }
        if self.code.wrapping_sub(self.low) >= self.range {
            return Err(Error::CorruptPayload("decoder state left the coding interval".into()));
        }
        Ok(())
    }

    /// Checks that the payload length matches what the encoder would have flushed.
    pub fn finish(mut self) -> Result<()> {
        if self.symbols > 0 {
            if self.target()? != SENTINEL {
                return Err(Error::CorruptPayload("missing end-of-stream sentinel".into()));
            }
            self.consume(SENTINEL, 1)?;
        }
        let (_, flush) = flush_value(self.low, self.range);
        let expected = self.shifts + flush;
        if self.data.len() != expected {
            return Err(Error::CorruptPayload(format!(
                "payload holds {} bytes, coder state implies {expected}",
                self.data.len()
            )));
        }
        Ok(())
    }
}
