//! Carry-less binary range coder (Subbotin style): 32-bit state, big-endian
//! renormalization bytes, 4-byte flush tail. Probability totals are capped at
//! 16 bits so `range / total` never underflows.

use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

/// Largest admissible cumulative frequency total.
pub const MAX_TOTAL: u32 = BOT;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            out: Vec::new(),
        }
    }

    /// Narrow the interval to `[cum, cum + freq) / total`.
    pub fn encode(&mut self, cum: u32, freq: u32, total: u32) {
        debug_assert!(freq > 0, "zero-frequency symbol");
        debug_assert!(cum + freq <= total && total <= MAX_TOTAL);
        let r = self.range / total;
        self.low = self.low.wrapping_add(cum * r);
        self.range = freq * r;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                // Underflow: clip the range to the next 2^16 boundary so the
                // top byte settles without carry propagation.
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn bytes_written(&self) -> usize {
        self.out.len()
    }

    /// Flush the remaining state; the tail is always 4 bytes.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut dec = RangeDecoder {
            low: 0,
            range: u32::MAX,
            code: 0,
            input,
            pos: 0,
        };
        for _ in 0..4 {
            dec.code = (dec.code << 8) | u32::from(dec.next_byte()?);
        }
        Ok(dec)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = self
            .input
            .get(self.pos)
            .copied()
            .ok_or_else(|| Error::EntropyStream("truncated stream".into()))?;
        self.pos += 1;
        Ok(b)
    }

    /// Cumulative-frequency bucket the coded value falls into; the caller
    /// maps it to a symbol and then calls [`RangeDecoder::advance`] with that
    /// symbol's interval.
    pub fn decode_target(&self, total: u32) -> u32 {
        let r = self.range / total;
        let t = self.code.wrapping_sub(self.low) / r;
        t.min(total - 1)
    }

    /// Mirror of [`RangeEncoder::encode`]; must receive the same interval.
    pub fn advance(&mut self, cum: u32, freq: u32, total: u32) -> Result<()> {
        let r = self.range / total;
        self.low = self.low.wrapping_add(cum * r);
        self.range = freq * r;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | u32::from(self.next_byte()?);
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }
}
