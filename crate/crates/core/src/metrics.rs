//! Rate and distortion metrics: Chamfer distance (grid-accelerated with an
//! exact brute-force oracle mode), masked range-image metrics, and
//! bits-per-point accounting.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::projection::{Mask, RangeImage};

/// One rate-distortion measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub chamfer: f64,
    pub rmse: Option<f64>,
    pub acc: Option<f64>,
}

#[inline]
fn dist2(a: &[f32; 3], b: &[f32; 3]) -> f64 {
    let dx = f64::from(a[0]) - f64::from(b[0]);
    let dy = f64::from(a[1]) - f64::from(b[1]);
    let dz = f64::from(a[2]) - f64::from(b[2]);
    dx * dx + dy * dy + dz * dz
}

/// Grid hash over a target cloud for nearest-neighbor queries. The cell edge
/// is set to the expected nearest-neighbor spacing of the cloud.
struct GridIndex<'a> {
    points: &'a [[f32; 3]],
    cells: HashMap<[i64; 3], Vec<u32>>,
    cell_size: f64,
    cell_lo: [i64; 3],
    cell_hi: [i64; 3],
}

impl<'a> GridIndex<'a> {
    fn build(points: &'a [[f32; 3]]) -> Self {
        debug_assert!(!points.is_empty());
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(f64::from(p[a]));
                hi[a] = hi[a].max(f64::from(p[a]));
            }
        }
        let volume: f64 = (0..3).map(|a| (hi[a] - lo[a]).max(1e-3)).product();
        let cell_size = (volume / points.len() as f64).cbrt().max(1e-6);
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        let mut cell_lo = [i64::MAX; 3];
        let mut cell_hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let cell = Self::cell_of(p, cell_size);
            for a in 0..3 {
                cell_lo[a] = cell_lo[a].min(cell[a]);
                cell_hi[a] = cell_hi[a].max(cell[a]);
            }
            cells.entry(cell).or_default().push(i as u32);
        }
        GridIndex {
            points,
            cells,
            cell_size,
            cell_lo,
            cell_hi,
        }
    }

    fn cell_of(p: &[f32; 3], cell_size: f64) -> [i64; 3] {
        [
            (f64::from(p[0]) / cell_size).floor() as i64,
            (f64::from(p[1]) / cell_size).floor() as i64,
            (f64::from(p[2]) / cell_size).floor() as i64,
        ]
    }

    /// Exact squared distance to the nearest indexed point. Scans Chebyshev
    /// rings of cells outward until no closer point can exist; only cells
    /// inside the occupied bounding box are visited, so queries far outside
    /// the cloud stay cheap.
    fn nearest_dist2(&self, p: &[f32; 3]) -> f64 {
        let center = Self::cell_of(p, self.cell_size);
        // Chebyshev distance from the query cell to the occupied box: rings
        // below it contain nothing, rings above max_ring do not exist.
        let mut start_ring = 0i64;
        let mut max_ring = 0i64;
        for a in 0..3 {
            let below = (self.cell_lo[a] - center[a]).max(0);
            let above = (center[a] - self.cell_hi[a]).max(0);
            start_ring = start_ring.max(below.max(above));
            max_ring = max_ring.max((self.cell_hi[a] - center[a]).max(center[a] - self.cell_lo[a]));
        }
        let mut best = f64::INFINITY;
        for ring in start_ring..=max_ring {
            let clamp =
                |v: i64, a: usize| v.clamp(self.cell_lo[a] - center[a], self.cell_hi[a] - center[a]);
            for dx in clamp(-ring, 0)..=clamp(ring, 0) {
                for dy in clamp(-ring, 1)..=clamp(ring, 1) {
                    for dz in clamp(-ring, 2)..=clamp(ring, 2) {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let key = [center[0] + dx, center[1] + dy, center[2] + dz];
                        if let Some(bucket) = self.cells.get(&key) {
                            for &i in bucket {
                                let d2 = dist2(p, &self.points[i as usize]);
                                if d2 < best {
                                    best = d2;
                                }
                            }
                        }
                    }
                }
            }
            // Any point in a later ring is at least ring * cell_size away.
            let lower = ring as f64 * self.cell_size;
            if best <= lower * lower {
                break;
            }
        }
        best
    }
}

fn directed_mean(from: &[[f32; 3]], index: &GridIndex) -> f64 {
    let mut sum = 0.0f64;
    for p in from {
        sum += index.nearest_dist2(p).sqrt();
    }
    sum / from.len() as f64
}

fn directed_mean_brute(from: &[[f32; 3]], to: &[[f32; 3]]) -> f64 {
    let mut sum = 0.0f64;
    for p in from {
        let mut best = f64::INFINITY;
        for q in to {
            let d2 = dist2(p, q);
            if d2 < best {
                best = d2;
            }
        }
        sum += best.sqrt();
    }
    sum / from.len() as f64
}

/// Symmetric Chamfer distance: sum of the two directed mean nearest-neighbor
/// distances, in meters.
pub fn chamfer(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::UndefinedMetric(
            "chamfer distance needs two nonempty clouds".into(),
        ));
    }
    let index_q = GridIndex::build(&q.points);
    let index_p = GridIndex::build(&p.points);
    Ok(directed_mean(&p.points, &index_q) + directed_mean(&q.points, &index_p))
}

/// O(N^2) reference used to validate the indexed implementation.
pub fn chamfer_brute(p: &PointCloud, q: &PointCloud) -> Result<f64> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::UndefinedMetric(
            "chamfer distance needs two nonempty clouds".into(),
        ));
    }
    Ok(directed_mean_brute(&p.points, &q.points) + directed_mean_brute(&q.points, &p.points))
}

/// Masked range-image metrics over pixels with mask bit 1:
/// (mean absolute error, root mean squared error, fraction within `tau`).
pub fn range_metrics(
    pred: &RangeImage,
    truth: &RangeImage,
    mask: &Mask,
    tau: f64,
) -> Result<(f64, f64, f64)> {
    if pred.height() != truth.height()
        || pred.width() != truth.width()
        || mask.height() != pred.height()
        || mask.width() != pred.width()
    {
        return Err(Error::InvalidParameter("shape mismatch".into()));
    }
    let mut n = 0usize;
    let mut abs_sum = 0.0f64;
    let mut sq_sum = 0.0f64;
    let mut hits = 0usize;
    for row in 0..pred.height() {
        for col in 0..pred.width() {
            if mask.get(row, col) == 0 {
                continue;
            }
            let d = f64::from(pred.get(row, col)) - f64::from(truth.get(row, col));
            n += 1;
            abs_sum += d.abs();
            sq_sum += d * d;
            if d.abs() < tau {
                hits += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("mask has no valid pixels".into()));
    }
    Ok((
        abs_sum / n as f64,
        (sq_sum / n as f64).sqrt(),
        hits as f64 / n as f64,
    ))
}

/// Bits per point against the ORIGINAL cloud sizes (including points the
/// projection discarded).
pub fn bpp(total_bits: u64, original_point_count: usize) -> Result<f64> {
    if original_point_count == 0 {
        return Err(Error::UndefinedMetric("bpp over zero points".into()));
    }
    Ok(total_bits as f64 / original_point_count as f64)
}
