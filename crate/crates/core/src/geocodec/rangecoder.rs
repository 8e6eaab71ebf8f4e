//! Byte-oriented range coder (LZMA lineage: 32-bit range, 64-bit low with
//! carry propagation through a cache byte). Symbols are coded from cumulative
//! frequency intervals over a fixed 16-bit total.

use crate::error::{Error, Result};

pub const TOTAL_BITS: u32 = 16;
pub const TOTAL: u32 = 1 << TOTAL_BITS;
const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    /// Codes the interval `[cum, cum + freq)` out of `TOTAL`.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum.checked_add(freq).is_some_and(|e| e <= TOTAL));
        self.range /= TOTAL;
        self.low += cum as u64 * self.range as u64;
        self.range *= freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut b = self.cache;
            loop {
                self.out.push(b.wrapping_add(carry));
                b = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            code: 0,
            range: u32::MAX,
            bytes,
            pos: 0,
        };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.read_byte()? as u32;
        }
        Ok(d)
    }

    fn read_byte(&mut self) -> Result<u8> {
        match self.bytes.get(self.pos) {
            Some(&b) => {
                self.pos += 1;
                Ok(b)
            }
            None => Err(Error::Stream(format!(
                "range decoder underrun at byte {}",
                self.pos
            ))),
        }
    }

    /// Scaled code value in `[0, TOTAL)`; call before `decode`.
    pub fn threshold(&mut self) -> u32 {
        self.range /= TOTAL;
        (self.code / self.range).min(TOTAL - 1)
    }

    /// Consumes the interval chosen from the preceding `threshold` call.
    pub fn decode(&mut self, cum: u32, freq: u32) -> Result<()> {
        self.code = self.code.wrapping_sub(cum * self.range);
        self.range *= freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.read_byte()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    /// Raw interval round trip with a fixed uniform split.
    #[test]
    fn raw_roundtrip() {
        let mut rng = StdRng::seed_from_u64(3);
        let freq = TOTAL / 4;
        let symbols: Vec<u32> = (0..5000).map(|_| rng.random_range(0..4)).collect();
        let mut enc = RangeEncoder::new();
        for &s in &symbols {
            enc.encode(s * freq, freq);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for &s in &symbols {
            let thr = dec.threshold();
            let got = thr / freq;
            assert_eq!(got, s);
            dec.decode(got * freq, freq).unwrap();
        }
    }

    #[test]
    fn truncated_stream_errors() {
        let mut enc = RangeEncoder::new();
        let freq = TOTAL / 2;
        for i in 0..1000u32 {
            enc.encode((i % 2) * freq, freq);
        }
        let bytes = enc.finish();
        let cut = &bytes[..10];
        let mut dec = RangeDecoder::new(cut).unwrap();
        let mut failed = false;
        for _ in 0..1000 {
            let thr = dec.threshold();
            let s = thr / freq;
            if dec.decode(s * freq, freq).is_err() {
                failed = true;
                break;
            }
        }
        assert!(failed, "severe truncation must underrun");
    }

    #[test]
    fn empty_decoder_needs_five_bytes() {
        assert!(RangeDecoder::new(&[]).is_err());
        assert!(RangeDecoder::new(&[0, 0, 0, 0, 0]).is_ok());
    }
}
