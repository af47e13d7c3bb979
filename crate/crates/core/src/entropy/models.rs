//! Probability models driving the range coder: adaptive order-0 frequencies,
//! adaptive binary contexts, and static discretized-Gaussian tables.

use crate::entropy::coder::{RangeDecoder, RangeEncoder, MAX_TOTAL};
use crate::error::{Error, Result};

const RESCALE_THRESHOLD: u32 = 1 << 15;
const INCREMENT: u32 = 32;

fn fnv1a(state: u64, word: u32) -> u64 {
    let mut h = state;
    for b in word.to_le_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Adaptive order-0 model: every symbol keeps a count of at least 1, counts
/// grow by a fixed increment and are halved when the total reaches the
/// rescale threshold.
#[derive(Debug, Clone)]
pub struct FrequencyModel {
    freqs: Vec<u32>,
    total: u32,
    increment: u32,
    rescale_threshold: u32,
}

impl FrequencyModel {
    pub fn new(alphabet: usize) -> Self {
        Self::with_settings(alphabet, INCREMENT, RESCALE_THRESHOLD)
    }

    /// A non-adapting model with equal frequencies.
    pub fn static_uniform(alphabet: usize) -> Self {
        Self::with_settings(alphabet, 0, RESCALE_THRESHOLD)
    }

    pub fn with_settings(alphabet: usize, increment: u32, rescale_threshold: u32) -> Self {
        assert!(alphabet >= 1);
        assert!(
            (alphabet as u32) < rescale_threshold && rescale_threshold <= MAX_TOTAL - increment,
            "model capacity exceeds coder precision"
        );
        FrequencyModel {
            freqs: vec![1; alphabet],
            total: alphabet as u32,
            increment,
            rescale_threshold,
        }
    }

    pub fn alphabet(&self) -> usize {
        self.freqs.len()
    }

    fn interval(&self, symbol: usize) -> (u32, u32) {
        let cum = self.freqs[..symbol].iter().sum();
        (cum, self.freqs[symbol])
    }

    fn update(&mut self, symbol: usize) {
        if self.increment == 0 {
            return;
        }
        self.freqs[symbol] += self.increment;
        self.total += self.increment;
        if self.total >= self.rescale_threshold {
            self.total = 0;
            for f in &mut self.freqs {
                *f = (*f + 1) >> 1;
                self.total += *f;
            }
        }
    }

    /// Code cost of `symbol` under the current state, in bits.
    pub fn cost_bits(&self, symbol: usize) -> f64 {
        -(f64::from(self.freqs[symbol]) / f64::from(self.total)).log2()
    }

    pub fn encode_symbol(&mut self, enc: &mut RangeEncoder, symbol: usize) -> Result<()> {
        if symbol >= self.freqs.len() {
            return Err(Error::SymbolOutOfAlphabet {
                symbol: symbol as i64,
                alphabet: self.freqs.len(),
            });
        }
        let (cum, freq) = self.interval(symbol);
        enc.encode(cum, freq, self.total);
        self.update(symbol);
        Ok(())
    }

    pub fn decode_symbol(&mut self, dec: &mut RangeDecoder) -> Result<usize> {
        let target = dec.decode_target(self.total);
        let mut cum = 0;
        let mut symbol = self.freqs.len() - 1;
        for (i, &f) in self.freqs.iter().enumerate() {
            if cum + f > target {
                symbol = i;
                break;
            }
            cum += f;
        }
        dec.advance(cum, self.freqs[symbol], self.total)?;
        self.update(symbol);
        Ok(symbol)
    }

    /// Order-independent digest of the model state; encoder and decoder must
    /// agree on it after coding any shared prefix.
    pub fn state_hash(&self) -> u64 {
        self.freqs.iter().fold(fnv1a(0xcbf29ce484222325, self.total), |h, f| fnv1a(h, *f))
    }
}

/// Adaptive binary model (one per mask context).
#[derive(Debug, Clone)]
pub struct BinaryModel {
    counts: [u32; 2],
    increment: u32,
    rescale_threshold: u32,
}

impl Default for BinaryModel {
    fn default() -> Self {
        Self::new()
    }
}

impl BinaryModel {
    pub fn new() -> Self {
        BinaryModel {
            counts: [1, 1],
            increment: INCREMENT,
            rescale_threshold: RESCALE_THRESHOLD,
        }
    }

    fn total(&self) -> u32 {
        self.counts[0] + self.counts[1]
    }

    fn update(&mut self, bit: u8) {
        self.counts[bit as usize] += self.increment;
        if self.total() >= self.rescale_threshold {
            self.counts = [(self.counts[0] + 1) >> 1, (self.counts[1] + 1) >> 1];
        }
    }

    pub fn cost_bits(&self, bit: u8) -> f64 {
        -(f64::from(self.counts[bit as usize]) / f64::from(self.total())).log2()
    }

    pub fn encode_bit(&mut self, enc: &mut RangeEncoder, bit: u8) {
        debug_assert!(bit <= 1);
        let total = self.total();
        if bit == 0 {
            enc.encode(0, self.counts[0], total);
        } else {
            enc.encode(self.counts[0], self.counts[1], total);
        }
        self.update(bit);
    }

    pub fn decode_bit(&mut self, dec: &mut RangeDecoder) -> Result<u8> {
        let total = self.total();
        let target = dec.decode_target(total);
        let bit = u8::from(target >= self.counts[0]);
        if bit == 0 {
            dec.advance(0, self.counts[0], total)?;
        } else {
            dec.advance(self.counts[0], self.counts[1], total)?;
        }
        self.update(bit);
        Ok(bit)
    }

    pub fn state_hash(&self) -> u64 {
        fnv1a(fnv1a(0xcbf29ce484222325, self.counts[0]), self.counts[1])
    }
}

/// Scale floor for Gaussian tables; smaller scales degenerate into a point
/// mass on symbol 0.
pub const SIGMA_MIN: f32 = 0.04;

const PROB_SCALE: f64 = (1 << 15) as f64;

/// Standard normal CDF.
fn phi(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Static fixed-point table for a discretized zero-mean Gaussian over the
/// integers. Probability of symbol `k` is `phi((k+0.5)/sigma) -
/// phi((k-0.5)/sigma)`; mass outside the effective support goes to a single
/// escape symbol whose payload is coded as a raw 32-bit value.
///
/// The effective support shrinks with `sigma` (roughly `5 sigma + 2` bins)
/// so that narrow distributions are not flattened by the one-count floor
/// every in-range symbol must keep at 16-bit precision.
#[derive(Debug, Clone)]
pub struct GaussianTable {
    support: i32,
    cum: Vec<u32>,
    total: u32,
}

impl GaussianTable {
    pub fn new(sigma: f32, max_symbol: i32) -> Self {
        assert!(max_symbol >= 1);
        let sigma = f64::from(sigma.max(SIGMA_MIN));
        let support = ((5.0 * sigma).ceil() as i32 + 2).clamp(1, max_symbol);

        // Counts for k in 0..=support, mirrored onto negative k.
        let mut pos_counts = Vec::with_capacity(support as usize + 1);
        let mut mass = 0.0;
        for k in 0..=support {
            let p = phi((f64::from(k) + 0.5) / sigma) - phi((f64::from(k) - 0.5) / sigma);
            let count = ((p * PROB_SCALE).round() as u32).max(1);
            pos_counts.push(count);
            mass += p * if k == 0 { 1.0 } else { 2.0 };
        }
        let escape = (((1.0 - mass).max(0.0) * PROB_SCALE).round() as u32).max(1);

        let alphabet = 2 * support as usize + 2;
        let mut cum = Vec::with_capacity(alphabet + 1);
        cum.push(0);
        let mut acc = 0u32;
        for idx in 0..alphabet {
            let count = if idx == alphabet - 1 {
                escape
            } else {
                let k = idx as i32 - support;
                pos_counts[k.unsigned_abs() as usize]
            };
            acc += count;
            cum.push(acc);
        }
        debug_assert!(acc <= MAX_TOTAL);
        GaussianTable {
            support,
            cum,
            total: acc,
        }
    }

    /// Largest symbol magnitude coded without the escape.
    pub fn support(&self) -> i32 {
        self.support
    }

    fn alphabet(&self) -> usize {
        self.cum.len() - 1
    }

    fn escape_index(&self) -> usize {
        self.alphabet() - 1
    }

    fn index_of(&self, symbol: i32) -> usize {
        if symbol.unsigned_abs() > self.support as u32 {
            self.escape_index()
        } else {
            (symbol + self.support) as usize
        }
    }

    /// Probability of coding `symbol` directly (0 for escaped symbols).
    pub fn prob(&self, symbol: i32) -> f64 {
        if symbol.unsigned_abs() > self.support as u32 {
            return 0.0;
        }
        let idx = self.index_of(symbol);
        f64::from(self.cum[idx + 1] - self.cum[idx]) / f64::from(self.total)
    }

    /// Code cost of `symbol` in bits, including the raw payload after an
    /// escape.
    pub fn cost_bits(&self, symbol: i32) -> f64 {
        let idx = self.index_of(symbol);
        let p = f64::from(self.cum[idx + 1] - self.cum[idx]) / f64::from(self.total);
        let mut bits = -p.log2();
        if idx == self.escape_index() {
            bits += 32.0;
        }
        bits
    }

    pub fn encode_symbol(&self, enc: &mut RangeEncoder, symbol: i32) {
        let idx = self.index_of(symbol);
        enc.encode(self.cum[idx], self.cum[idx + 1] - self.cum[idx], self.total);
        if idx == self.escape_index() {
            encode_raw_u32(enc, symbol as u32);
        }
    }

    pub fn decode_symbol(&self, dec: &mut RangeDecoder) -> Result<i32> {
        let target = dec.decode_target(self.total);
        let idx = match self.cum.partition_point(|&c| c <= target) {
            0 => 0,
            i => i - 1,
        };
        dec.advance(self.cum[idx], self.cum[idx + 1] - self.cum[idx], self.total)?;
        if idx == self.escape_index() {
            Ok(decode_raw_u32(dec)? as i32)
        } else {
            Ok(idx as i32 - self.support)
        }
    }
}

/// Raw 32-bit side value, coded as four uniform bytes.
pub fn encode_raw_u32(enc: &mut RangeEncoder, value: u32) {
    for shift in [24, 16, 8, 0] {
        let byte = (value >> shift) & 0xFF;
        enc.encode(byte, 1, 256);
    }
}

pub fn decode_raw_u32(dec: &mut RangeDecoder) -> Result<u32> {
    let mut value = 0u32;
    for _ in 0..4 {
        let byte = dec.decode_target(256);
        dec.advance(byte, 1, 256)?;
        value = (value << 8) | byte;
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adaptive_model_roundtrips_and_locksteps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let symbols: Vec<usize> = (0..20_000)
            .map(|_| if rng.gen_bool(0.8) { 7 } else { rng.gen_range(0..64) })
            .collect();
        let mut enc_model = FrequencyModel::new(64);
        let mut enc = RangeEncoder::new();
        let mut enc_hashes = Vec::new();
        for &s in &symbols {
            enc_model.encode_symbol(&mut enc, s).unwrap();
            enc_hashes.push(enc_model.state_hash());
        }
        let bytes = enc.finish();

        let mut dec_model = FrequencyModel::new(64);
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for (i, &s) in symbols.iter().enumerate() {
            assert_eq!(dec_model.decode_symbol(&mut dec).unwrap(), s);
            assert_eq!(dec_model.state_hash(), enc_hashes[i], "state diverged at {i}");
        }
    }

    #[test]
    fn out_of_alphabet_symbol_is_rejected() {
        let mut model = FrequencyModel::new(16);
        let mut enc = RangeEncoder::new();
        assert!(matches!(
            model.encode_symbol(&mut enc, 16),
            Err(Error::SymbolOutOfAlphabet { .. })
        ));
    }

    #[test]
    fn bernoulli_stream_codes_near_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bits: Vec<u8> = (0..100_000).map(|_| u8::from(rng.gen_bool(0.1))).collect();
        let mut model = BinaryModel::new();
        let mut enc = RangeEncoder::new();
        for &b in &bits {
            model.encode_bit(&mut enc, b);
        }
        let coded_bits = enc.finish().len() as f64 * 8.0;
        // H(0.9) = 0.469 bits/symbol.
        let entropy = 0.46899559358928133 * bits.len() as f64;
        assert!(
            (coded_bits - entropy).abs() <= 0.03 * entropy,
            "coded {coded_bits} vs entropy {entropy}"
        );
    }

    #[test]
    fn gaussian_table_matches_reference_probabilities() {
        let table = GaussianTable::new(1.0, 255);
        let p0 = phi(0.5) - phi(-0.5);
        assert!((table.prob(0) - p0).abs() < 1e-3, "P(0) = {}", table.prob(0));
        // Symmetry is exact in fixed point.
        for k in 1..=table.support() {
            assert_eq!(
                (table.cum[table.index_of(k) + 1] - table.cum[table.index_of(k)]),
                (table.cum[table.index_of(-k) + 1] - table.cum[table.index_of(-k)])
            );
        }
    }

    #[test]
    fn gaussian_table_at_sigma_floor_concentrates() {
        let table = GaussianTable::new(0.0, 255);
        assert!(table.prob(0) >= 0.999, "P(0) = {}", table.prob(0));
    }

    #[test]
    fn gaussian_roundtrip_with_escapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for sigma in [0.05f32, 0.7, 3.0, 40.0] {
            let table = GaussianTable::new(sigma, 64);
            let symbols: Vec<i32> = (0..5_000)
                .map(|_| {
                    if rng.gen_bool(0.005) {
                        rng.gen_range(-100_000..100_000)
                    } else {
                        (rng.gen_range(-3.0..3.0) * f64::from(sigma)) as i32
                    }
                })
                .collect();
            let mut enc = RangeEncoder::new();
            for &s in &symbols {
                table.encode_symbol(&mut enc, s);
            }
            let bytes = enc.finish();
            let mut dec = RangeDecoder::new(&bytes).unwrap();
            for &s in &symbols {
                assert_eq!(table.decode_symbol(&mut dec).unwrap(), s);
            }
        }
    }
}
