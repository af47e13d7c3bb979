//! Spherical projection of point clouds onto range images, the inverse
//! backprojection, and extraction of the validity mask.
//!
//! A range image stores one laser range per pixel; the value `0.0` is the
//! sentinel for "no return" (an invalid pixel). The mask is the indicator of
//! valid pixels and is transmitted as side information by the inter codec.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;

/// Geometry of the scanning sensor: grid size, vertical field of view and
/// mount height. Pixel centers define the exact ray directions used by both
/// projection and synthetic scene generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorConfig {
    pub height: usize,
    pub width: usize,
    /// Upper edge of the vertical field of view, degrees.
    pub fov_up_deg: f32,
    /// Lower edge of the vertical field of view, degrees. Must be below `fov_up_deg`.
    pub fov_down_deg: f32,
    /// Height of the sensor origin above z = 0, meters. Only used when
    /// raycasting synthetic scenes; projection itself is origin-relative.
    pub sensor_height: f32,
}

impl Default for SensorConfig {
    /// Velodyne HDL-64E conventions (64 x 2048, +2.0 / -24.9 degrees).
    fn default() -> Self {
        SensorConfig {
            height: 64,
            width: 2048,
            fov_up_deg: 2.0,
            fov_down_deg: -24.9,
            sensor_height: 1.73,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidParameter(
                "sensor grid must be at least 1x1".into(),
            ));
        }
        if !(self.fov_down_deg < self.fov_up_deg) {
            return Err(Error::InvalidParameter(format!(
                "fov_down ({}) must be below fov_up ({})",
                self.fov_down_deg, self.fov_up_deg
            )));
        }
        Ok(())
    }

    fn fov_span_deg(&self) -> f64 {
        f64::from(self.fov_up_deg) - f64::from(self.fov_down_deg)
    }

    /// Unit direction of the center of pixel `(row, col)`.
    ///
    /// Row 0 looks at the top of the field of view; column 0 looks at yaw
    /// just below +pi and yaw decreases with the column index.
    pub fn pixel_direction(&self, row: usize, col: usize) -> [f64; 3] {
        debug_assert!(row < self.height && col < self.width);
        let pitch_deg = f64::from(self.fov_up_deg)
            - (row as f64 + 0.5) / self.height as f64 * self.fov_span_deg();
        let pitch = pitch_deg.to_radians();
        let yaw = PI - (col as f64 + 0.5) / self.width as f64 * 2.0 * PI;
        let (sp, cp) = (pitch.sin(), pitch.cos());
        let (sy, cy) = (yaw.sin(), yaw.cos());
        [cp * cy, cp * sy, sp]
    }
}

/// H x W grid of ranges in meters; `0.0` marks an invalid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    pub sensor: SensorConfig,
    pub frame_index: u32,
    values: Vec<f32>,
}

impl RangeImage {
    pub fn zeros(sensor: SensorConfig, frame_index: u32) -> Self {
        RangeImage {
            sensor,
            frame_index,
            values: vec![0.0; sensor.height * sensor.width],
        }
    }

    pub fn height(&self) -> usize {
        self.sensor.height
    }

    pub fn width(&self) -> usize {
        self.sensor.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.sensor.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        debug_assert!(value.is_finite() && value >= 0.0);
        self.values[row * self.sensor.width + col] = value;
    }

    /// Row-major view of the pixel values.
    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| **v != 0.0).count()
    }

    /// Elementwise product with a mask; pixels with mask bit 0 become 0.
    pub fn masked(&self, mask: &Mask) -> RangeImage {
        assert_eq!(self.values.len(), mask.bits().len());
        let mut out = self.clone();
        for (v, b) in out.values.iter_mut().zip(mask.bits()) {
            if *b == 0 {
                *v = 0.0;
            }
        }
        out
    }
}

/// H x W binary grid; bit 1 marks a valid range-image pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Self {
        assert_eq!(bits.len(), height * width);
        assert!(bits.iter().all(|b| *b <= 1));
        Mask {
            height,
            width,
            bits,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.bits[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, bit: u8) {
        debug_assert!(bit <= 1);
        self.bits[row * self.width + col] = bit;
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Number of set bits, i.e. the number of valid pixels.
    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b == 1).count()
    }
}

/// Per-cloud bookkeeping from [`project`]: how many input points could not be
/// represented in the range image and why.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProjectionStats {
    pub input_points: usize,
    /// Points whose pitch falls outside the vertical field of view.
    pub out_of_fov: usize,
    /// Points that shared a pixel with a nearer point.
    pub collisions: usize,
    /// Points at the origin (zero range), which carry no direction.
    pub zero_range: usize,
}

/// Project a point cloud onto the sensor grid, keeping the nearest point on
/// pixel collisions. Untouched pixels stay 0 (invalid).
pub fn project(cloud: &PointCloud, sensor: SensorConfig, frame_index: u32) -> Result<RangeImage> {
    project_with_stats(cloud, sensor, frame_index).map(|(img, _)| img)
}

/// [`project`] plus discard accounting (used by the CLI to report how many
/// original points the projection itself dropped).
pub fn project_with_stats(
    cloud: &PointCloud,
    sensor: SensorConfig,
    frame_index: u32,
) -> Result<(RangeImage, ProjectionStats)> {
    sensor.validate()?;
    let mut image = RangeImage::zeros(sensor, frame_index);
    let mut stats = ProjectionStats {
        input_points: cloud.points.len(),
        ..ProjectionStats::default()
    };
    let h = sensor.height as f64;
    let w = sensor.width as f64;
    let fov_up = f64::from(sensor.fov_up_deg);
    let fov_down = f64::from(sensor.fov_down_deg);
    let span = sensor.fov_span_deg();

    for p in &cloud.points {
        let (x, y, z) = (f64::from(p[0]), f64::from(p[1]), f64::from(p[2]));
        let r = (x * x + y * y + z * z).sqrt();
        if r == 0.0 {
            stats.zero_range += 1;
            continue;
        }
        let pitch_deg = (z / r).asin().to_degrees();
        if pitch_deg < fov_down || pitch_deg > fov_up {
            stats.out_of_fov += 1;
            continue;
        }
        let yaw = y.atan2(x);
        let col = (((1.0 - (yaw + PI) / (2.0 * PI)) * w).floor() as i64)
            .clamp(0, sensor.width as i64 - 1) as usize;
        let row = (((fov_up - pitch_deg) / span * h).floor() as i64)
            .clamp(0, sensor.height as i64 - 1) as usize;
        let range = r as f32;
        let cur = image.get(row, col);
        if cur == 0.0 {
            image.set(row, col, range);
        } else {
            stats.collisions += 1;
            if range < cur {
                image.set(row, col, range);
            }
        }
    }
    Ok((image, stats))
}

/// Emit one 3D point per valid pixel, in row-major pixel order, along the
/// pixel-center ray at the stored range.
pub fn backproject(image: &RangeImage) -> PointCloud {
    let mut points = Vec::with_capacity(image.valid_count());
    for row in 0..image.height() {
        for col in 0..image.width() {
            let r = image.get(row, col);
            if r == 0.0 {
                continue;
            }
            let d = image.sensor.pixel_direction(row, col);
            let r = f64::from(r);
            points.push([(r * d[0]) as f32, (r * d[1]) as f32, (r * d[2]) as f32]);
        }
    }
    PointCloud { points }
}

/// The validity mask: bit 0 exactly where the range is 0.
pub fn extract_mask(image: &RangeImage) -> Mask {
    let bits = image
        .values()
        .iter()
        .map(|v| u8::from(*v != 0.0))
        .collect();
    Mask::from_bits(image.height(), image.width(), bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_sensor() -> SensorConfig {
        SensorConfig {
            height: 16,
            width: 64,
            fov_up_deg: 3.0,
            fov_down_deg: -25.0,
            sensor_height: 1.8,
        }
    }

    #[test]
    fn axis_aligned_point_lands_on_expected_pixel() {
        let sensor = small_sensor();
        let cloud = PointCloud {
            points: vec![[7.5, 0.0, 0.0]],
        };
        let img = project(&cloud, sensor, 0).unwrap();
        // pitch 0 in [-25, 3]; yaw 0 maps to the middle column band.
        let row = ((3.0 / 28.0) * 16.0_f64).floor() as usize;
        let col = sensor.width / 2;
        assert_eq!(img.get(row, col), 7.5);
        assert_eq!(img.valid_count(), 1);
    }

    #[test]
    fn collision_keeps_nearest_range() {
        let sensor = small_sensor();
        let cloud = PointCloud {
            points: vec![[5.0, 0.0, 0.0], [3.0, 0.0, 0.0]],
        };
        let (img, stats) = project_with_stats(&cloud, sensor, 0).unwrap();
        assert_eq!(img.valid_count(), 1);
        assert_eq!(stats.collisions, 1);
        let row = ((3.0 / 28.0) * 16.0_f64).floor() as usize;
        assert_eq!(img.get(row, sensor.width / 2), 3.0);
    }

    #[test]
    fn out_of_fov_points_are_discarded() {
        let sensor = small_sensor();
        let cloud = PointCloud {
            points: vec![[1.0, 0.0, 10.0], [1.0, 0.0, -10.0], [4.0, 1.0, 0.0]],
        };
        let (img, stats) = project_with_stats(&cloud, sensor, 0).unwrap();
        assert_eq!(stats.out_of_fov, 2);
        assert_eq!(img.valid_count(), 1);
    }

    #[test]
    fn empty_cloud_projects_to_all_zero_image() {
        let img = project(&PointCloud::new(), small_sensor(), 0).unwrap();
        assert_eq!(img.valid_count(), 0);
        assert!(backproject(&img).points.is_empty());
    }

    #[test]
    fn backproject_preserves_range_norm() {
        let sensor = small_sensor();
        let mut img = RangeImage::zeros(sensor, 0);
        img.set(5, 17, 10.0);
        let cloud = backproject(&img);
        assert_eq!(cloud.points.len(), 1);
        let p = cloud.points[0];
        let norm = (f64::from(p[0]).powi(2) + f64::from(p[1]).powi(2) + f64::from(p[2]).powi(2))
            .sqrt();
        assert!((norm - 10.0).abs() / 10.0 < 1e-5);
    }

    #[test]
    fn roundtrip_is_idempotent_on_projected_images() {
        let sensor = small_sensor();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut img = RangeImage::zeros(sensor, 0);
        for row in 0..sensor.height {
            for col in 0..sensor.width {
                if rng.gen_bool(0.6) {
                    img.set(row, col, rng.gen_range(1.0..24.0));
                }
            }
        }
        let cloud = backproject(&img);
        assert_eq!(cloud.points.len(), img.valid_count());
        let img2 = project(&cloud, sensor, 0).unwrap();
        for row in 0..sensor.height {
            for col in 0..sensor.width {
                let (a, b) = (img.get(row, col), img2.get(row, col));
                assert_eq!(a == 0.0, b == 0.0, "validity changed at ({row},{col})");
                if a != 0.0 {
                    assert!((f64::from(a) - f64::from(b)).abs() / f64::from(a) < 1e-5);
                }
            }
        }
    }

    #[test]
    fn mask_is_zero_exactly_where_image_is_zero() {
        let sensor = small_sensor();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let mut img = RangeImage::zeros(sensor, 0);
            for row in 0..sensor.height {
                for col in 0..sensor.width {
                    if rng.gen_bool(0.5) {
                        img.set(row, col, rng.gen_range(0.5..30.0));
                    }
                }
            }
            let mask = extract_mask(&img);
            for row in 0..sensor.height {
                for col in 0..sensor.width {
                    assert_eq!(mask.get(row, col) == 0, img.get(row, col) == 0.0);
                }
            }
            // Masking identity: x * m = x.
            assert_eq!(img.masked(&mask), img);
            assert_eq!(mask.count_ones(), img.valid_count());
        }
    }

    #[test]
    fn mask_of_mixed_values() {
        let sensor = SensorConfig {
            height: 2,
            width: 2,
            ..small_sensor()
        };
        let mut img = RangeImage::zeros(sensor, 0);
        img.set(0, 1, 7.2);
        img.set(1, 1, 1.5);
        let mask = extract_mask(&img);
        assert_eq!(mask.bits(), &[0, 1, 0, 1]);
    }
}
