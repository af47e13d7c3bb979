//! Range coding engine and the probability models used across the codec:
//! adaptive order-0 for residual symbols, context-adaptive binary for masks,
//! and discretized Gaussians for hyperprior latents.

mod coder;
mod mask;
mod models;

pub use coder::{RangeDecoder, RangeEncoder, MAX_TOTAL};
pub use mask::{mask_decode, mask_encode};
pub use models::{
    decode_raw_u32, encode_raw_u32, BinaryModel, FrequencyModel, GaussianTable, SIGMA_MIN,
};

use crate::error::Result;

/// Symbols with magnitude above this are escape-coded with a raw payload.
pub const SIGNED_CLAMP: i32 = 2047;

const SIGNED_ALPHABET: usize = 2 * SIGNED_CLAMP as usize + 2;

fn signed_index(symbol: i32) -> usize {
    if symbol.unsigned_abs() > SIGNED_CLAMP as u32 {
        SIGNED_ALPHABET - 1
    } else {
        (symbol + SIGNED_CLAMP) as usize
    }
}

/// Encode signed integer symbols with an adaptive order-0 model over
/// `[-SIGNED_CLAMP, SIGNED_CLAMP]` plus an escape for overflow values.
pub fn encode_signed(symbols: &[i32]) -> Vec<u8> {
    if symbols.is_empty() {
        return Vec::new();
    }
    let mut model = FrequencyModel::new(SIGNED_ALPHABET);
    let mut enc = RangeEncoder::new();
    for &s in symbols {
        let idx = signed_index(s);
        model
            .encode_symbol(&mut enc, idx)
            .expect("index is in-alphabet by construction");
        if idx == SIGNED_ALPHABET - 1 {
            encode_raw_u32(&mut enc, s as u32);
        }
    }
    enc.finish()
}

/// Inverse of [`encode_signed`]; `count` symbols are expected.
pub fn decode_signed(bytes: &[u8], count: usize) -> Result<Vec<i32>> {
    let mut out = Vec::with_capacity(count);
    if count == 0 {
        return Ok(out);
    }
    let mut model = FrequencyModel::new(SIGNED_ALPHABET);
    let mut dec = RangeDecoder::new(bytes)?;
    for _ in 0..count {
        let idx = model.decode_symbol(&mut dec)?;
        if idx == SIGNED_ALPHABET - 1 {
            out.push(decode_raw_u32(&mut dec)? as i32);
        } else {
            out.push(idx as i32 - SIGNED_CLAMP);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_signed_stream() {
        assert!(encode_signed(&[]).is_empty());
        assert_eq!(decode_signed(&[], 0).unwrap(), Vec::<i32>::new());
    }

    #[test]
    fn signed_roundtrip_with_overflow_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let symbols: Vec<i32> = (0..10_000)
            .map(|_| {
                if rng.gen_bool(0.01) {
                    rng.gen::<i32>()
                } else {
                    rng.gen_range(-2047..=2047)
                }
            })
            .collect();
        let bytes = encode_signed(&symbols);
        assert_eq!(decode_signed(&bytes, symbols.len()).unwrap(), symbols);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn signed_streams_always_roundtrip(symbols in proptest::collection::vec(any::<i16>(), 0..512)) {
            let symbols: Vec<i32> = symbols.into_iter().map(i32::from).collect();
            let bytes = encode_signed(&symbols);
            prop_assert_eq!(decode_signed(&bytes, symbols.len()).unwrap(), symbols);
        }

        #[test]
        fn adaptive_streams_roundtrip(
            alphabet in 2usize..4096,
            seed in any::<u64>(),
            len in 0usize..600,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let symbols: Vec<usize> = (0..len).map(|_| rng.gen_range(0..alphabet)).collect();
            let mut enc_model = FrequencyModel::new(alphabet);
            let mut enc = RangeEncoder::new();
            for &s in &symbols {
                enc_model.encode_symbol(&mut enc, s).unwrap();
            }
            let bytes = enc.finish();
            if !symbols.is_empty() {
                let mut dec_model = FrequencyModel::new(alphabet);
                let mut dec = RangeDecoder::new(&bytes).unwrap();
                for &s in &symbols {
                    prop_assert_eq!(dec_model.decode_symbol(&mut dec).unwrap(), s);
                }
            }
        }
    }
}
