//! Residual-frame coding. The residual is the elementwise difference
//! between the ground-truth frame and its prediction; it is exactly 0 on
//! invalid pixels since both terms are. Two backends code it: a handcrafted
//! quantize-and-entropy-code path and a learned transform coder with a
//! hyperprior entropy model (see [`learned`]).

mod learned;

pub use learned::{
    train_residual, HyperpriorModel, RateReport, ResidualSample, ResidualTrainConfig,
    LAMBDA_LADDER,
};

use crate::entropy::{decode_signed, encode_signed};
use crate::error::{Error, Result};
use crate::projection::{Mask, RangeImage};

/// Smallest range a decoded valid pixel may take, mirroring the intra codec.
const MIN_VALID_RANGE: f32 = 1e-6;

/// H x W grid of signed residual values, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualFrame {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl ResidualFrame {
    pub fn zeros(height: usize, width: usize) -> Self {
        ResidualFrame {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn from_values(height: usize, width: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), height * width);
        ResidualFrame {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// r = x - pred, elementwise.
pub fn residual_compute(x: &RangeImage, pred: &RangeImage) -> ResidualFrame {
    assert_eq!(x.height(), pred.height());
    assert_eq!(x.width(), pred.width());
    let values = x
        .values()
        .iter()
        .zip(pred.values())
        .map(|(a, b)| a - b)
        .collect();
    ResidualFrame::from_values(x.height(), x.width(), values)
}

/// x_hat = pred + r_hat on valid pixels (clamped positive), exactly 0 on
/// invalid pixels.
pub fn residual_apply(pred: &RangeImage, residual: &ResidualFrame, mask: &Mask) -> RangeImage {
    assert_eq!(pred.height(), residual.height());
    assert_eq!(pred.width(), residual.width());
    let mut out = RangeImage::zeros(pred.sensor, pred.frame_index);
    for row in 0..pred.height() {
        for col in 0..pred.width() {
            if mask.get(row, col) == 0 {
                continue;
            }
            let v = f64::from(pred.get(row, col)) + f64::from(residual.get(row, col));
            out.set(row, col, (v as f32).max(MIN_VALID_RANGE));
        }
    }
    out
}

/// Handcrafted path: quantize valid-pixel residuals to `round(r / q)` and
/// entropy-code them with the adaptive order-0 model.
pub fn hc_encode(residual: &ResidualFrame, mask: &Mask, quant_step: f32) -> Result<Vec<u8>> {
    if !(quant_step > 0.0) {
        return Err(Error::InvalidParameter("quant_step must be > 0".into()));
    }
    let q = f64::from(quant_step);
    let mut symbols = Vec::with_capacity(mask.count_ones());
    for row in 0..residual.height() {
        for col in 0..residual.width() {
            if mask.get(row, col) == 1 {
                symbols.push((f64::from(residual.get(row, col)) / q).round() as i32);
            }
        }
    }
    Ok(encode_signed(&symbols))
}

/// Inverse of [`hc_encode`]; reconstructs `symbol * q` at valid pixels.
pub fn hc_decode(bytes: &[u8], mask: &Mask, quant_step: f32) -> Result<ResidualFrame> {
    let symbols = decode_signed(bytes, mask.count_ones())?;
    let q = f64::from(quant_step);
    let mut out = ResidualFrame::zeros(mask.height(), mask.width());
    let mut it = symbols.into_iter();
    for row in 0..mask.height() {
        for col in 0..mask.width() {
            if mask.get(row, col) == 1 {
                let s = it.next().expect("symbol count matches mask");
                out.values[row * mask.width() + col] = (f64::from(s) * q) as f32;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projection::{extract_mask, SensorConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sensor() -> SensorConfig {
        SensorConfig {
            height: 8,
            width: 16,
            fov_up_deg: 3.0,
            fov_down_deg: -25.0,
            sensor_height: 1.8,
        }
    }

    /// Values on a power-of-two lattice make float subtraction exact, so the
    /// lossless-residual identity can be asserted bit-for-bit.
    fn lattice_image(rng: &mut ChaCha8Rng, density: f64) -> RangeImage {
        let mut img = RangeImage::zeros(sensor(), 0);
        for row in 0..8 {
            for col in 0..16 {
                if rng.gen_bool(density) {
                    let v = rng.gen_range(1..20_000) as f32 / 1024.0;
                    img.set(row, col, v);
                }
            }
        }
        img
    }

    #[test]
    fn zero_residual_when_prediction_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = lattice_image(&mut rng, 0.7);
        let r = residual_compute(&x, &x);
        assert!(r.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lossless_residual_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let x = lattice_image(&mut rng, 0.7);
            let mask = extract_mask(&x);
            let pred = {
                // A prediction valid exactly where x is, off by lattice steps.
                let mut p = x.clone();
                for v in p.values_mut() {
                    if *v != 0.0 {
                        *v += rng.gen_range(-512..512) as f32 / 1024.0;
                        *v = v.max(1.0 / 1024.0);
                    }
                }
                p
            };
            let r = residual_compute(&x, &pred);
            let back = residual_apply(&pred, &r, &mask);
            assert_eq!(back.values(), x.values());
            // Invalid pixels carry an exactly-zero residual.
            for (rv, m) in r.values().iter().zip(mask.bits()) {
                if *m == 0 {
                    assert_eq!(*rv, 0.0);
                }
            }
        }
    }

    #[test]
    fn hc_symbols_follow_rounding_arithmetic() {
        let mut r = ResidualFrame::zeros(8, 16);
        r.values[0] = 0.26;
        let mut mask = Mask::zeros(8, 16);
        mask.set(0, 0, 1);
        let bytes = hc_encode(&r, &mask, 0.1).unwrap();
        let decoded = hc_decode(&bytes, &mask, 0.1).unwrap();
        // 0.26 / 0.1 rounds to symbol 3, reconstructing 0.3.
        assert!((decoded.get(0, 0) - 0.3).abs() < 1e-6);
    }

    #[test]
    fn hc_all_zero_residual_is_tiny() {
        let sensor = SensorConfig {
            height: 64,
            width: 256,
            ..sensor()
        };
        let r = ResidualFrame::zeros(64, 256);
        let mask = Mask::from_bits(64, 256, vec![1; 64 * 256]);
        let bytes = hc_encode(&r, &mask, 0.05).unwrap();
        assert!(bytes.len() < 32, "all-zero stream took {} bytes", bytes.len());
        let decoded = hc_decode(&bytes, &mask, 0.05).unwrap();
        assert!(decoded.values().iter().all(|v| *v == 0.0));
        let _ = sensor;
    }

    #[test]
    fn hc_roundtrip_respects_quant_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for q in [0.02f32, 0.05, 0.1, 0.2] {
            for _ in 0..20 {
                let mut r = ResidualFrame::zeros(8, 16);
                let mut mask = Mask::zeros(8, 16);
                for row in 0..8 {
                    for col in 0..16 {
                        if rng.gen_bool(0.8) {
                            mask.set(row, col, 1);
                            r.values[row * 16 + col] = rng.gen_range(-4.0..4.0);
                        }
                    }
                }
                let bytes = hc_encode(&r, &mask, q).unwrap();
                let decoded = hc_decode(&bytes, &mask, q).unwrap();
                for (a, b) in r.values().iter().zip(decoded.values()) {
                    assert!((a - b).abs() <= q / 2.0 + 1e-6);
                }
            }
        }
    }

    #[test]
    fn hc_truncated_stream_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut r = ResidualFrame::zeros(8, 16);
        let mask = Mask::from_bits(8, 16, vec![1; 128]);
        for v in &mut r.values {
            *v = rng.gen_range(-5.0..5.0);
        }
        let bytes = hc_encode(&r, &mask, 0.02).unwrap();
        assert!(hc_decode(&bytes[..2], &mask, 0.02).is_err());
    }
}
