//! Lossless mask codec: context-adaptive binary arithmetic coding with a
//! (left, above) pixel context, out-of-bounds neighbors treated as 0.

use crate::entropy::coder::{RangeDecoder, RangeEncoder};
use crate::entropy::models::BinaryModel;
use crate::error::Result;
use crate::projection::Mask;

const NUM_CONTEXTS: usize = 4;

#[inline]
fn context(mask: &Mask, row: usize, col: usize) -> usize {
    let left = if col > 0 { mask.get(row, col - 1) } else { 0 };
    let above = if row > 0 { mask.get(row - 1, col) } else { 0 };
    (left * 2 + above) as usize
}

pub fn mask_encode(mask: &Mask) -> Vec<u8> {
    if mask.height() * mask.width() == 0 {
        return Vec::new();
    }
    let mut models: Vec<BinaryModel> = (0..NUM_CONTEXTS).map(|_| BinaryModel::new()).collect();
    let mut enc = RangeEncoder::new();
    for row in 0..mask.height() {
        for col in 0..mask.width() {
            models[context(mask, row, col)].encode_bit(&mut enc, mask.get(row, col));
        }
    }
    enc.finish()
}

pub fn mask_decode(bytes: &[u8], height: usize, width: usize) -> Result<Mask> {
    let mut mask = Mask::zeros(height, width);
    if height * width == 0 {
        return Ok(mask);
    }
    let mut models: Vec<BinaryModel> = (0..NUM_CONTEXTS).map(|_| BinaryModel::new()).collect();
    let mut dec = RangeDecoder::new(bytes)?;
    for row in 0..height {
        for col in 0..width {
            let bit = models[context(&mask, row, col)].decode_bit(&mut dec)?;
            mask.set(row, col, bit);
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn roundtrip(mask: &Mask) -> Mask {
        let bytes = mask_encode(mask);
        mask_decode(&bytes, mask.height(), mask.width()).unwrap()
    }

    #[test]
    fn all_ones_mask_is_tiny() {
        let mask = Mask::from_bits(64, 256, vec![1; 64 * 256]);
        let bytes = mask_encode(&mask);
        assert!(bytes.len() < 64, "compressed to {} bytes", bytes.len());
        assert_eq!(mask_decode(&bytes, 64, 256).unwrap(), mask);
    }

    #[test]
    fn structured_masks_roundtrip() {
        // Checkerboard.
        let mut checker = Mask::zeros(32, 64);
        for r in 0..32 {
            for c in 0..64 {
                checker.set(r, c, ((r + c) % 2) as u8);
            }
        }
        assert_eq!(roundtrip(&checker), checker);

        // Horizontal bands (typical of range images).
        let mut bands = Mask::zeros(32, 64);
        for r in 8..28 {
            for c in 0..64 {
                bands.set(r, c, 1);
            }
        }
        assert_eq!(roundtrip(&bands), bands);

        // All zeros.
        let zeros = Mask::zeros(16, 16);
        assert_eq!(roundtrip(&zeros), zeros);
    }

    #[test]
    fn random_masks_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let h = rng.gen_range(1..24);
            let w = rng.gen_range(1..48);
            let density = rng.gen_range(0.0..=1.0);
            let bits = (0..h * w).map(|_| u8::from(rng.gen_bool(density))).collect();
            let mask = Mask::from_bits(h, w, bits);
            assert_eq!(roundtrip(&mask), mask);
        }
    }

    #[test]
    fn truncated_mask_stream_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let bits = (0..64 * 64).map(|_| u8::from(rng.gen_bool(0.5))).collect();
        let mask = Mask::from_bits(64, 64, bits);
        let bytes = mask_encode(&mask);
        assert!(mask_decode(&bytes[..bytes.len() / 4], 64, 64).is_err());
    }
}
