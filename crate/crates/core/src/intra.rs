//! Intra-frame codec: farthest-point-sampled region seeds, per-region mean
//! ranges, and quantized residual symbols.
//!
//! The decoder never sees a region map. It re-derives the pixel-to-region
//! assignment from the transmitted seed pixels and region means: a seed's 3D
//! position is reconstructed at its region mean range, and a pixel joins the
//! seed that is closest to the pixel's own ray evaluated at that seed's mean
//! range. The encoder runs the identical rule after fixing the means, so both
//! sides agree and the per-pixel quantization bound holds.

use std::io::Read;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::entropy::{decode_signed, encode_signed, mask_decode, mask_encode};
use crate::error::{Error, Result};
use crate::projection::{extract_mask, Mask, RangeImage, SensorConfig};

/// Everything the decoder needs for one intra frame.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraPayload {
    pub seed_pixels: Vec<(u16, u16)>,
    pub region_means: Vec<f32>,
    pub quant_step: f32,
    /// Quantized residual symbols, one per valid pixel in row-major order.
    pub symbols: Vec<i32>,
    /// Compressed validity mask.
    pub mask_bytes: Vec<u8>,
}

fn valid_pixels(mask: &Mask) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(mask.count_ones());
    for row in 0..mask.height() {
        for col in 0..mask.width() {
            if mask.get(row, col) == 1 {
                out.push((row, col));
            }
        }
    }
    out
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn scale(dir: &[f64; 3], r: f64) -> [f64; 3] {
    [dir[0] * r, dir[1] * r, dir[2] * r]
}

/// Deterministic farthest point sampling over the backprojected valid
/// pixels: the first seed is the first valid pixel in row-major order, each
/// following seed maximizes the minimum 3D distance to the chosen set (ties
/// to the smallest row-major index).
pub fn fps_seeds(image: &RangeImage, seed_count: usize) -> Result<Vec<(u16, u16)>> {
    if seed_count == 0 {
        return Err(Error::InvalidParameter("seed_count must be >= 1".into()));
    }
    let mask = extract_mask(image);
    let pixels = valid_pixels(&mask);
    if pixels.is_empty() {
        return Err(Error::EmptyFrame);
    }
    let positions: Vec<[f64; 3]> = pixels
        .iter()
        .map(|&(row, col)| {
            let dir = image.sensor.pixel_direction(row, col);
            scale(&dir, f64::from(image.get(row, col)))
        })
        .collect();

    let target = seed_count.min(pixels.len());
    let mut chosen = Vec::with_capacity(target);
    let mut min_d2 = vec![f64::INFINITY; pixels.len()];
    let mut current = 0usize;
    chosen.push(current);
    while chosen.len() < target {
        let mut best = 0usize;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, d) in min_d2.iter_mut().enumerate() {
            let to_current = dist2(&positions[i], &positions[current]);
            if to_current < *d {
                *d = to_current;
            }
            if *d > best_d2 {
                best_d2 = *d;
                best = i;
            }
        }
        current = best;
        chosen.push(current);
    }
    Ok(chosen
        .into_iter()
        .map(|i| (pixels[i].0 as u16, pixels[i].1 as u16))
        .collect())
}

/// The shared encoder/decoder assignment rule. `dirs` are the valid pixels'
/// ray directions; a pixel scores a seed by placing itself at the seed's
/// mean range along its own ray and measuring the distance to the seed's
/// reconstructed position. Ties go to the lower seed index.
fn assign_regions(
    dirs: &[[f64; 3]],
    seed_positions: &[[f64; 3]],
    means: &[f32],
) -> Vec<usize> {
    dirs.iter()
        .map(|dir| {
            let mut best = 0usize;
            let mut best_d2 = f64::INFINITY;
            for (s, seed_pos) in seed_positions.iter().enumerate() {
                let hypothetical = scale(dir, f64::from(means[s]));
                let d2 = dist2(&hypothetical, seed_pos);
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = s;
                }
            }
            best
        })
        .collect()
}

fn seed_positions(sensor: &SensorConfig, seeds: &[(u16, u16)], means: &[f32]) -> Vec<[f64; 3]> {
    seeds
        .iter()
        .zip(means)
        .map(|(&(row, col), &mean)| {
            let dir = sensor.pixel_direction(usize::from(row), usize::from(col));
            scale(&dir, f64::from(mean))
        })
        .collect()
}

pub fn intra_encode(image: &RangeImage, seed_count: usize, quant_step: f32) -> Result<IntraPayload> {
    if !(quant_step > 0.0) {
        return Err(Error::InvalidParameter("quant_step must be > 0".into()));
    }
    let mask = extract_mask(image);
    let pixels = valid_pixels(&mask);
    if pixels.is_empty() {
        return Err(Error::EmptyFrame);
    }
    let seeds = fps_seeds(image, seed_count)?;

    let dirs: Vec<[f64; 3]> = pixels
        .iter()
        .map(|&(row, col)| image.sensor.pixel_direction(row, col))
        .collect();
    let ranges: Vec<f64> = pixels
        .iter()
        .map(|&(row, col)| f64::from(image.get(row, col)))
        .collect();
    let positions: Vec<[f64; 3]> = dirs
        .iter()
        .zip(&ranges)
        .map(|(d, r)| scale(d, *r))
        .collect();

    // First pass: regions from the seeds' true positions give the means.
    let true_seed_pos: Vec<[f64; 3]> = seeds
        .iter()
        .map(|&(row, col)| {
            let dir = image.sensor.pixel_direction(usize::from(row), usize::from(col));
            scale(&dir, f64::from(image.get(usize::from(row), usize::from(col))))
        })
        .collect();
    let mut sums = vec![0.0f64; seeds.len()];
    let mut counts = vec![0usize; seeds.len()];
    for (pos, range) in positions.iter().zip(&ranges) {
        let mut best = 0usize;
        let mut best_d2 = f64::INFINITY;
        for (s, sp) in true_seed_pos.iter().enumerate() {
            let d2 = dist2(pos, sp);
            if d2 < best_d2 {
                best_d2 = d2;
                best = s;
            }
        }
        sums[best] += range;
        counts[best] += 1;
    }
    // A region can only be empty if its seed was re-assigned elsewhere by a
    // tie; fall back to the seed's own range so the mean stays positive.
    let region_means: Vec<f32> = sums
        .iter()
        .zip(&counts)
        .zip(&seeds)
        .map(|((sum, count), &(row, col))| {
            if *count == 0 {
                image.get(usize::from(row), usize::from(col))
            } else {
                (sum / *count as f64) as f32
            }
        })
        .collect();

    // Second pass: the decoder-reproducible assignment from transmitted data.
    let coded_seed_pos = seed_positions(&image.sensor, &seeds, &region_means);
    let assignment = assign_regions(&dirs, &coded_seed_pos, &region_means);

    let q = f64::from(quant_step);
    let symbols: Vec<i32> = assignment
        .iter()
        .zip(&ranges)
        .map(|(&region, &range)| {
            let residual = range - f64::from(region_means[region]);
            (residual / q).round() as i32
        })
        .collect();

    Ok(IntraPayload {
        seed_pixels: seeds,
        region_means,
        quant_step,
        symbols,
        mask_bytes: mask_encode(&mask),
    })
}

/// Smallest range a decoded valid pixel may take; keeps reconstruction from
/// colliding with the invalid-pixel sentinel 0.
const MIN_VALID_RANGE: f32 = 1e-6;

pub fn intra_decode(
    payload: &IntraPayload,
    sensor: SensorConfig,
    frame_index: u32,
) -> Result<RangeImage> {
    let mask = mask_decode(&payload.mask_bytes, sensor.height, sensor.width)?;
    let pixels = valid_pixels(&mask);
    if pixels.len() != payload.symbols.len() {
        return Err(Error::EntropyStream(format!(
            "mask has {} valid pixels but payload carries {} symbols",
            pixels.len(),
            payload.symbols.len()
        )));
    }
    if payload.seed_pixels.len() != payload.region_means.len() {
        return Err(Error::EntropyStream("seed/mean count mismatch".into()));
    }
    let dirs: Vec<[f64; 3]> = pixels
        .iter()
        .map(|&(row, col)| sensor.pixel_direction(row, col))
        .collect();
    let coded_seed_pos = seed_positions(&sensor, &payload.seed_pixels, &payload.region_means);
    let assignment = assign_regions(&dirs, &coded_seed_pos, &payload.region_means);

    let q = f64::from(payload.quant_step);
    let mut image = RangeImage::zeros(sensor, frame_index);
    for ((&(row, col), &region), &symbol) in pixels.iter().zip(&assignment).zip(&payload.symbols) {
        let range = f64::from(payload.region_means[region]) + f64::from(symbol) * q;
        image.set(row, col, (range as f32).max(MIN_VALID_RANGE));
    }
    Ok(image)
}

impl IntraPayload {
    /// Wire format:
    /// `S u16 | S x (row u16, col u16) | S x mean f32 | q f32 |
    ///  mask_len u32 | mask bytes | symbol_count u32 | residual stream`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.write_u16::<LittleEndian>(self.seed_pixels.len() as u16)
            .unwrap();
        for &(row, col) in &self.seed_pixels {
            out.write_u16::<LittleEndian>(row).unwrap();
            out.write_u16::<LittleEndian>(col).unwrap();
        }
        for &mean in &self.region_means {
            out.write_f32::<LittleEndian>(mean).unwrap();
        }
        out.write_f32::<LittleEndian>(self.quant_step).unwrap();
        out.write_u32::<LittleEndian>(self.mask_bytes.len() as u32)
            .unwrap();
        out.extend_from_slice(&self.mask_bytes);
        out.write_u32::<LittleEndian>(self.symbols.len() as u32)
            .unwrap();
        out.extend_from_slice(&encode_signed(&self.symbols));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<IntraPayload> {
        let mut input = bytes;
        let err = |what: &str| Error::EntropyStream(format!("intra payload: {what}"));
        let seed_count = input
            .read_u16::<LittleEndian>()
            .map_err(|_| err("missing seed count"))? as usize;
        let mut seed_pixels = Vec::with_capacity(seed_count);
        for _ in 0..seed_count {
            let row = input.read_u16::<LittleEndian>().map_err(|_| err("seeds"))?;
            let col = input.read_u16::<LittleEndian>().map_err(|_| err("seeds"))?;
            seed_pixels.push((row, col));
        }
        let mut region_means = Vec::with_capacity(seed_count);
        for _ in 0..seed_count {
            region_means.push(
                input
                    .read_f32::<LittleEndian>()
                    .map_err(|_| err("means"))?,
            );
        }
        let quant_step = input
            .read_f32::<LittleEndian>()
            .map_err(|_| err("quant step"))?;
        let mask_len = input
            .read_u32::<LittleEndian>()
            .map_err(|_| err("mask length"))? as usize;
        let mut mask_bytes = vec![0u8; mask_len];
        input
            .read_exact(&mut mask_bytes)
            .map_err(|_| err("mask bytes truncated"))?;
        let symbol_count = input
            .read_u32::<LittleEndian>()
            .map_err(|_| err("symbol count"))? as usize;
        let symbols = decode_signed(input, symbol_count)?;
        Ok(IntraPayload {
            seed_pixels,
            region_means,
            quant_step,
            symbols,
            mask_bytes,
        })
    }
}
