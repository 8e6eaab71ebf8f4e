//! Probability models for the range coder and the symbol-level wrappers.
//!
//! Models expose a categorical distribution plus an update hook; the coder
//! quantizes the distribution to 16-bit cumulative frequencies, guaranteeing
//! every symbol at least one count so any model remains codable.

use crate::error::{Error, Result};

use super::rangecoder::{RangeDecoder, RangeEncoder, TOTAL};

pub trait ProbabilityModel {
    /// Current distribution; non-negative, sums to 1 within 1e-9.
    fn probs(&self) -> &[f64];
    /// Observes one symbol. No-op for static models.
    fn update(&mut self, _symbol: u32) {}
}

/// Fixed distribution.
pub struct StaticModel {
    probs: Vec<f64>,
}

impl StaticModel {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum: f64 = probs.iter().sum();
        if probs.len() < 2 || probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Precondition(format!(
                "need >= 2 probabilities in [0,1], got {probs:?}"
            )));
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition(format!("probabilities sum to {sum}")));
        }
        Ok(StaticModel { probs })
    }

    pub fn uniform(k: usize) -> Self {
        StaticModel {
            probs: vec![1.0 / k as f64; k],
        }
    }
}

impl ProbabilityModel for StaticModel {
    fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Exponential-decay adaptive model: on each observed symbol every
/// probability decays by `1 - RATE` and the observed one gains `RATE`.
/// Initialized uniform.
#[derive(Clone)]
pub struct AdaptiveModel {
    probs: Vec<f64>,
}

/// Update rate of the adaptive models.
pub const ADAPT_RATE: f64 = 1.0 / 32.0;

impl AdaptiveModel {
    pub fn new(k: usize) -> Self {
        assert!(k >= 2, "alphabet needs at least 2 symbols");
        AdaptiveModel {
            probs: vec![1.0 / k as f64; k],
        }
    }

    pub fn binary() -> Self {
        Self::new(2)
    }
}

impl ProbabilityModel for AdaptiveModel {
    fn probs(&self) -> &[f64] {
        &self.probs
    }

    fn update(&mut self, symbol: u32) {
        for p in self.probs.iter_mut() {
            *p *= 1.0 - ADAPT_RATE;
        }
        self.probs[symbol as usize] += ADAPT_RATE;
    }
}

/// 16-bit frequency table: every symbol gets at least 1 count, the remaining
/// budget is split by probability, leftover counts go to the most probable
/// symbol (first on ties).
pub fn quantized_freqs(probs: &[f64]) -> Vec<u32> {
    let k = probs.len() as u32;
    debug_assert!(k >= 2 && k < TOTAL);
    let budget = (TOTAL - k) as f64;
    let mut freqs: Vec<u32> = probs.iter().map(|p| 1 + (p * budget) as u32).collect();
    let sum: u32 = freqs.iter().sum();
    let mut argmax = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[argmax] {
            argmax = i;
        }
    }
    freqs[argmax] += TOTAL - sum;
    freqs
}

/// FNV-1a over the probability bit patterns; used to check encoder/decoder
/// model states stay in lockstep.
pub fn state_hash(model: &dyn ProbabilityModel) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for p in model.probs() {
        for byte in p.to_bits().to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Range encoder plus per-stream accounting: symbol count and the model
/// cross-entropy estimate in bits.
pub struct SymbolEncoder {
    rc: RangeEncoder,
    pub n_symbols: u64,
    pub est_bits: f64,
}

impl SymbolEncoder {
    pub fn new() -> Self {
        SymbolEncoder {
            rc: RangeEncoder::new(),
            n_symbols: 0,
            est_bits: 0.0,
        }
    }

    pub fn encode(&mut self, model: &mut dyn ProbabilityModel, symbol: u32) {
        let probs = model.probs();
        debug_assert!((symbol as usize) < probs.len());
        self.est_bits -= probs[symbol as usize].log2();
        let freqs = quantized_freqs(probs);
        let cum: u32 = freqs[..symbol as usize].iter().sum();
        self.rc.encode(cum, freqs[symbol as usize]);
        self.n_symbols += 1;
        model.update(symbol);
    }

    pub fn encode_bit(&mut self, model: &mut dyn ProbabilityModel, bit: bool) {
        self.encode(model, bit as u32);
    }

    /// Emits the byte stream; an untouched encoder emits nothing.
    pub fn finish(self) -> Vec<u8> {
        if self.n_symbols == 0 {
            Vec::new()
        } else {
            self.rc.finish()
        }
    }
}

impl Default for SymbolEncoder {
    fn default() -> Self {
        Self::new()
    }
}

pub struct SymbolDecoder<'a> {
    rc: RangeDecoder<'a>,
}

impl<'a> SymbolDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        Ok(SymbolDecoder {
            rc: RangeDecoder::new(bytes)?,
        })
    }

    pub fn decode(&mut self, model: &mut dyn ProbabilityModel) -> Result<u32> {
        let freqs = quantized_freqs(model.probs());
        let thr = self.rc.threshold();
        let mut cum = 0u32;
        let mut symbol = freqs.len() as u32 - 1;
        for (i, &f) in freqs.iter().enumerate() {
            if thr < cum + f {
                symbol = i as u32;
                break;
            }
            cum += f;
        }
        self.rc.decode(cum, freqs[symbol as usize])?;
        model.update(symbol);
        Ok(symbol)
    }

    pub fn decode_bit(&mut self, model: &mut dyn ProbabilityModel) -> Result<bool> {
        Ok(self.decode(model)? == 1)
    }
}

/// One-shot helper: codes `symbols` under `model` (updated in place).
pub fn encode_symbols(symbols: &[u32], model: &mut dyn ProbabilityModel) -> Vec<u8> {
    let mut enc = SymbolEncoder::new();
    for &s in symbols {
        enc.encode(model, s);
    }
    enc.finish()
}

/// Inverse of `encode_symbols` given the symbol count and a model in the
/// encoder's initial state.
pub fn decode_symbols(
    bytes: &[u8],
    count: usize,
    model: &mut dyn ProbabilityModel,
) -> Result<Vec<u32>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let mut dec = SymbolDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(dec.decode(model)?);
    }
    Ok(out)
}

/// Cross-entropy of `symbols` under the evolving `model`, in bits.
pub fn estimate_rate(symbols: &[u32], model: &mut dyn ProbabilityModel) -> f64 {
    let mut bits = 0.0;
    for &s in symbols {
        bits -= model.probs()[s as usize].log2();
        model.update(s);
    }
    bits
}
