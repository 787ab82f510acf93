//! Point clouds, planar (3-DoF) rigid transforms, and the spherical
//! projection of a scan onto a 2D range image.

use thiserror::Error;

/// Number of quantization levels for normalized range values. Ranges are
/// snapped to a 16-bit grid before normalization, so a cell value is always
/// `level / 65535` with `level` in `1..=65535`; level 0 is reserved for
/// "no return".
pub const RANGE_LEVELS: u32 = u16::MAX as u32;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("point cloud must contain at least one point")]
    EmptyCloud,
    #[error("non-finite coordinate in point {index}: ({x}, {y}, {z})")]
    NonFinitePoint { index: usize, x: f64, y: f64, z: f64 },
    #[error("intensity count {intensities} does not match point count {points}")]
    IntensityCountMismatch { points: usize, intensities: usize },
    #[error("intensity {value} at point {index} outside [0, 1]")]
    IntensityOutOfRange { index: usize, value: f64 },
    #[error("invalid projection config: {0}")]
    InvalidProjection(String),
}

/// A single 3D point in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// A LiDAR scan: a list of points in the sensor frame, optionally with a
/// per-point intensity in `[0, 1]`.
///
/// Invariants are checked at construction: at least one point, all
/// coordinates finite, and intensities (when present) matching the point
/// count.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    intensities: Option<Vec<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self, GeometryError> {
        Self::validate_points(&points)?;
        Ok(Self { points, intensities: None })
    }

    pub fn with_intensities(
        points: Vec<Point3>,
        intensities: Vec<f64>,
    ) -> Result<Self, GeometryError> {
        Self::validate_points(&points)?;
        if intensities.len() != points.len() {
            return Err(GeometryError::IntensityCountMismatch {
                points: points.len(),
                intensities: intensities.len(),
            });
        }
        for (index, &value) in intensities.iter().enumerate() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(GeometryError::IntensityOutOfRange { index, value });
            }
        }
        Ok(Self { points, intensities: Some(intensities) })
    }

    fn validate_points(points: &[Point3]) -> Result<(), GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        for (index, p) in points.iter().enumerate() {
            if !p.is_finite() {
                return Err(GeometryError::NonFinitePoint { index, x: p.x, y: p.y, z: p.z });
            }
        }
        Ok(())
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn intensities(&self) -> Option<&[f64]> {
        self.intensities.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Normalizes an angle to `[-pi, pi)`.
pub fn normalize_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let n = a - 2.0 * PI * ((a + PI) / (2.0 * PI)).floor();
    // Guard against the rounding case n == pi (e.g. a slightly below -pi).
    if n >= PI {
        n - 2.0 * PI
    } else {
        n
    }
}

/// A 3-DoF pose on the ground plane: translation in meters, heading in
/// radians normalized to `[-pi, pi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarPose {
    pub x: f64,
    pub y: f64,
    theta: f64,
}

impl PlanarPose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta: normalize_angle(theta) }
    }

    pub fn identity() -> Self {
        Self { x: 0.0, y: 0.0, theta: 0.0 }
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// Applies the pose to a point: rotation by `theta` about z, then
    /// translation by `(x, y, 0)`.
    pub fn apply(&self, p: Point3) -> Point3 {
        let (s, c) = self.theta.sin_cos();
        Point3::new(c * p.x - s * p.y + self.x, s * p.x + c * p.y + self.y, p.z)
    }

    /// Composition `self * other`: the pose of a frame expressed in `other`'s
    /// coordinates, re-expressed in `self`'s parent frame.
    pub fn compose(&self, other: &PlanarPose) -> PlanarPose {
        let (s, c) = self.theta.sin_cos();
        PlanarPose::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> PlanarPose {
        let (s, c) = self.theta.sin_cos();
        PlanarPose::new(
            -(c * self.x + s * self.y),
            -(-s * self.x + c * self.y),
            -self.theta,
        )
    }

    /// Euclidean ground-plane distance to another pose.
    pub fn distance(&self, other: &PlanarPose) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }
}

/// Geometry of the spherical projection: image size, zenith span, and the
/// range normalization cap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionConfig {
    /// Rows (zenith bins).
    pub height: usize,
    /// Columns (azimuth bins); covers the full 360 degrees.
    pub width: usize,
    /// Lower zenith bound in radians (maps to the bottom row).
    pub zenith_min: f64,
    /// Upper zenith bound in radians (maps to the top row).
    pub zenith_max: f64,
    /// Ranges are clamped to this value and normalized by it, in meters.
    pub max_range: f64,
}

impl ProjectionConfig {
    pub fn new(
        height: usize,
        width: usize,
        zenith_min: f64,
        zenith_max: f64,
        max_range: f64,
    ) -> Result<Self, GeometryError> {
        if height < 2 {
            return Err(GeometryError::InvalidProjection(format!(
                "height must be >= 2, got {height}"
            )));
        }
        if width < 8 {
            return Err(GeometryError::InvalidProjection(format!(
                "width must be >= 8, got {width}"
            )));
        }
        if !(zenith_min < zenith_max) {
            return Err(GeometryError::InvalidProjection(format!(
                "zenith span empty: [{zenith_min}, {zenith_max}]"
            )));
        }
        if !(max_range > 0.0) || !max_range.is_finite() {
            return Err(GeometryError::InvalidProjection(format!(
                "max_range must be positive and finite, got {max_range}"
            )));
        }
        Ok(Self { height, width, zenith_min, zenith_max, max_range })
    }
}

/// A 2D range image: rows index zenith, columns index azimuth over the full
/// 360 degree field of view, cells hold normalized range in `[0, 1]` with 0
/// meaning "no return".
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    height: usize,
    width: usize,
    cells: Vec<f64>,
    zenith_min: f64,
    zenith_max: f64,
}

impl RangeImage {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Radians of azimuth covered by one column.
    pub fn azimuth_resolution(&self) -> f64 {
        std::f64::consts::TAU / self.width as f64
    }

    pub fn zenith_span(&self) -> (f64, f64) {
        (self.zenith_min, self.zenith_max)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.cells[row * self.width + col]
    }

    pub fn cells(&self) -> &[f64] {
        &self.cells
    }

    /// Circularly shifts columns so that input column `c` lands in output
    /// column `(c + k) mod width`; matches a yaw rotation of the source
    /// cloud by `k` azimuth bins.
    pub fn shift_columns(&self, k: i64) -> RangeImage {
        let w = self.width as i64;
        let shift = k.rem_euclid(w) as usize;
        let mut cells = vec![0.0; self.cells.len()];
        for row in 0..self.height {
            let src = &self.cells[row * self.width..(row + 1) * self.width];
            let dst = &mut cells[row * self.width..(row + 1) * self.width];
            for (c, &v) in src.iter().enumerate() {
                let mut nc = c + shift;
                if nc >= self.width {
                    nc -= self.width;
                }
                dst[nc] = v;
            }
        }
        RangeImage { height: self.height, width: self.width, cells, ..*self }
    }
}

/// Projects a scan onto a range image with the spherical model: column from
/// the azimuth `atan2(p_y, p_x)`, row from the zenith `asin(p_z / ||p||)`.
///
/// When several points fall into one cell the minimum range wins (the
/// nearest surface dominates). Ranges are clamped to `max_range`, snapped to
/// the 16-bit grid and divided by it, so values lie in `[1/65535, 1]` for
/// returns and 0 for empty cells. Points outside the zenith span are
/// dropped.
pub fn project_scan(
    cloud: &PointCloud,
    config: &ProjectionConfig,
) -> Result<RangeImage, GeometryError> {
    if cloud.is_empty() {
        return Err(GeometryError::EmptyCloud);
    }
    let h = config.height;
    let w = config.width;
    let span = config.zenith_max - config.zenith_min;
    // Sensors often emit beams exactly at the span bounds; a strict
    // comparison would drop them on sub-ulp rounding noise, so the bounds
    // carry a tiny tolerance (the row clamp pins such points to the edge
    // rows deterministically).
    const ZENITH_EDGE_TOL: f64 = 1e-9;
    let mut cells = vec![0.0f64; h * w];
    for p in cloud.points() {
        let range = p.norm();
        if range <= 0.0 {
            // A point at the sensor origin has no direction; skip it.
            continue;
        }
        let zenith = (p.z / range).asin();
        if zenith < config.zenith_min - ZENITH_EDGE_TOL
            || zenith > config.zenith_max + ZENITH_EDGE_TOL
        {
            continue;
        }
        let azimuth = p.y.atan2(p.x);
        let col = (((azimuth + std::f64::consts::PI) / std::f64::consts::TAU * w as f64).floor()
            as i64)
            .rem_euclid(w as i64) as usize;
        let row_raw = ((config.zenith_max - zenith) / span * h as f64).floor() as i64;
        let row = row_raw.clamp(0, h as i64 - 1) as usize;
        let value = quantize_range(range, config.max_range);
        let cell = &mut cells[row * w + col];
        if *cell == 0.0 || value < *cell {
            *cell = value;
        }
    }
    Ok(RangeImage {
        height: h,
        width: w,
        cells,
        zenith_min: config.zenith_min,
        zenith_max: config.zenith_max,
    })
}

/// Snaps a range to the 16-bit grid of `max_range` and normalizes to (0, 1].
/// Level 0 is reserved for empty cells, so real returns saturate at level 1
/// from below.
pub fn quantize_range(range: f64, max_range: f64) -> f64 {
    let clamped = range.clamp(0.0, max_range);
    let level = ((clamped / max_range * RANGE_LEVELS as f64).round() as u32).clamp(1, RANGE_LEVELS);
    level as f64 / RANGE_LEVELS as f64
}

/// Rotates every point about the z-axis by `delta` radians. Ranges are
/// preserved; the rotated scan looks as if it had been captured with the
/// sensor heading decreased by `delta`.
pub fn rotate_yaw(cloud: &PointCloud, delta: f64) -> PointCloud {
    let (s, c) = delta.sin_cos();
    let points = cloud
        .points()
        .iter()
        .map(|p| Point3::new(c * p.x - s * p.y, s * p.x + c * p.y, p.z))
        .collect();
    PointCloud { points, intensities: cloud.intensities.clone() }
}

/// Applies a planar pose to every point of the cloud.
pub fn transform_planar(cloud: &PointCloud, pose: &PlanarPose) -> PointCloud {
    let points = cloud.points().iter().map(|p| pose.apply(*p)).collect();
    PointCloud { points, intensities: cloud.intensities.clone() }
}
