//! Deterministic synthetic environments and a ray-cast LiDAR simulator.
//!
//! Scenes are a flat ground plane populated with axis-aligned boxes and
//! vertical cylinders. Trajectories run on a ring of radius
//! `RING_RADIUS_FRACTION * extent` around the scene center; scene generation
//! keeps that corridor free of primitives so no pose is ever enclosed.
//! Everything is a pure function of the seed and parameters.

use crate::dataset::ScanRecord;
use crate::geometry::{PlanarPose, Point3, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Where the trajectory ring sits relative to the scene extent.
pub const RING_RADIUS_FRACTION: f64 = 0.3;
/// Primitives keep at least this margin to the trajectory ring, in meters.
const CORRIDOR_CLEARANCE: f64 = 1.6;
/// Rays shorter than this are treated as misses.
const MIN_RAY_T: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("scene extent must be positive, got {0}")]
    InvalidExtent(f64),
    #[error("scene needs at least one primitive")]
    NoPrimitives,
    #[error("could not place primitive {index} outside the trajectory corridor")]
    Placement { index: usize },
    #[error("pose ({x}, {y}) outside scene extent {extent}")]
    PoseOutsideScene { x: f64, y: f64, extent: f64 },
    #[error("invalid sensor config: {0}")]
    InvalidSensor(String),
    #[error("trajectory invariant violated: {0}")]
    InvalidTrajectory(String),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// An obstacle standing on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    /// Axis-aligned box spanning `[cx - hx, cx + hx] x [cy - hy, cy + hy] x [0, height]`.
    Box { cx: f64, cy: f64, hx: f64, hy: f64, height: f64 },
    /// Vertical cylinder centered at `(cx, cy)`, `z` in `[0, height]`.
    Cylinder { cx: f64, cy: f64, radius: f64, height: f64 },
}

impl Primitive {
    fn bounding_radius(&self) -> f64 {
        match *self {
            Primitive::Box { hx, hy, .. } => (hx * hx + hy * hy).sqrt(),
            Primitive::Cylinder { radius, .. } => radius,
        }
    }

    fn center(&self) -> (f64, f64) {
        match *self {
            Primitive::Box { cx, cy, .. } => (cx, cy),
            Primitive::Cylinder { cx, cy, .. } => (cx, cy),
        }
    }

    /// Smallest `t >= MIN_RAY_T` where `origin + t * dir` hits the surface.
    fn intersect(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        match *self {
            Primitive::Box { cx, cy, hx, hy, height } => {
                let lo = [cx - hx, cy - hy, 0.0];
                let hi = [cx + hx, cy + hy, height];
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for axis in 0..3 {
                    if dir[axis].abs() < 1e-15 {
                        if origin[axis] < lo[axis] || origin[axis] > hi[axis] {
                            return None;
                        }
                        continue;
                    }
                    let inv = 1.0 / dir[axis];
                    let mut t0 = (lo[axis] - origin[axis]) * inv;
                    let mut t1 = (hi[axis] - origin[axis]) * inv;
                    if t0 > t1 {
                        std::mem::swap(&mut t0, &mut t1);
                    }
                    t_near = t_near.max(t0);
                    t_far = t_far.min(t1);
                    if t_near > t_far {
                        return None;
                    }
                }
                let t = if t_near >= MIN_RAY_T { t_near } else { t_far };
                (t >= MIN_RAY_T).then_some(t)
            }
            Primitive::Cylinder { cx, cy, radius, height } => {
                let ox = origin[0] - cx;
                let oy = origin[1] - cy;
                let a = dir[0] * dir[0] + dir[1] * dir[1];
                let mut best: Option<f64> = None;
                if a > 1e-15 {
                    let b = 2.0 * (ox * dir[0] + oy * dir[1]);
                    let c = ox * ox + oy * oy - radius * radius;
                    let disc = b * b - 4.0 * a * c;
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                            if t >= MIN_RAY_T {
                                let z = origin[2] + t * dir[2];
                                if (0.0..=height).contains(&z) {
                                    best = Some(best.map_or(t, |b: f64| b.min(t)));
                                }
                            }
                        }
                    }
                }
                // Top cap.
                if dir[2].abs() > 1e-15 {
                    let t = (height - origin[2]) / dir[2];
                    if t >= MIN_RAY_T {
                        let x = ox + t * dir[0];
                        let y = oy + t * dir[1];
                        if x * x + y * y <= radius * radius {
                            best = Some(best.map_or(t, |b: f64| b.min(t)));
                        }
                    }
                }
                best
            }
        }
    }
}

/// A generated environment: ground plane plus primitives, reproducible from
/// the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    seed: u64,
    extent: f64,
    primitives: Vec<Primitive>,
}

impl Scene {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn primitives(&self) -> &[Primitive] {
        &self.primitives
    }

    /// Radius of the obstacle-free trajectory corridor.
    pub fn ring_radius(&self) -> f64 {
        RING_RADIUS_FRACTION * self.extent
    }
}

/// Generates a deterministic scene: `n_primitives` boxes and cylinders
/// scattered over `[-extent/2, extent/2]^2`, keeping the trajectory ring
/// corridor clear.
pub fn generate_scene(seed: u64, extent: f64, n_primitives: usize) -> Result<Scene, SynthError> {
    if !(extent > 0.0) {
        return Err(SynthError::InvalidExtent(extent));
    }
    if n_primitives == 0 {
        return Err(SynthError::NoPrimitives);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ring = RING_RADIUS_FRACTION * extent;
    let half = extent / 2.0;
    let mut primitives = Vec::with_capacity(n_primitives);
    for index in 0..n_primitives {
        let mut placed = false;
        for _ in 0..1000 {
            let primitive = if rng.gen_bool(0.6) {
                Primitive::Box {
                    cx: rng.gen_range(-half..half),
                    cy: rng.gen_range(-half..half),
                    hx: rng.gen_range(0.4..1.6),
                    hy: rng.gen_range(0.4..1.6),
                    height: rng.gen_range(0.8..4.0),
                }
            } else {
                Primitive::Cylinder {
                    cx: rng.gen_range(-half..half),
                    cy: rng.gen_range(-half..half),
                    radius: rng.gen_range(0.25..1.0),
                    height: rng.gen_range(0.8..4.0),
                }
            };
            let (cx, cy) = primitive.center();
            let radial = (cx * cx + cy * cy).sqrt();
            if (radial - ring).abs() >= CORRIDOR_CLEARANCE + primitive.bounding_radius() {
                primitives.push(primitive);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::Placement { index });
        }
    }
    Ok(Scene { seed, extent, primitives })
}

/// Beam layout and range model of the simulated LiDAR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorConfig {
    /// Azimuth steps over the full turn.
    pub beams_azimuth: usize,
    /// Vertical beams, evenly spaced over the zenith span (inclusive).
    pub beams_zenith: usize,
    pub zenith_min: f64,
    pub zenith_max: f64,
    pub max_range: f64,
    /// Sensor height above the ground plane, in meters.
    pub height: f64,
    /// Standard deviation of optional Gaussian range jitter; 0 disables it.
    pub range_jitter_std: f64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        SensorConfig {
            beams_azimuth: 360,
            beams_zenith: 16,
            zenith_min: -25f64.to_radians(),
            zenith_max: 5f64.to_radians(),
            max_range: 80.0,
            height: 1.5,
            range_jitter_std: 0.0,
        }
    }
}

impl SensorConfig {
    fn validate(&self) -> Result<(), SynthError> {
        if self.beams_azimuth == 0 || self.beams_zenith == 0 {
            return Err(SynthError::InvalidSensor("beam counts must be positive".into()));
        }
        if !(self.zenith_min < self.zenith_max) {
            return Err(SynthError::InvalidSensor("zenith span empty".into()));
        }
        if !(self.max_range > 0.0) {
            return Err(SynthError::InvalidSensor("max_range must be positive".into()));
        }
        if !(self.height > 0.0) {
            return Err(SynthError::InvalidSensor("sensor height must be positive".into()));
        }
        Ok(())
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Casts one ray per (zenith, azimuth) beam from the sensor mounted at the
/// pose and returns the hit points in the sensor frame. Misses produce no
/// point. Deterministic: identical inputs give bit-identical clouds.
pub fn simulate_scan(
    scene: &Scene,
    pose: &PlanarPose,
    sensor: &SensorConfig,
) -> Result<PointCloud, SynthError> {
    sensor.validate()?;
    let half = scene.extent / 2.0;
    if pose.x.abs() > half || pose.y.abs() > half {
        return Err(SynthError::PoseOutsideScene { x: pose.x, y: pose.y, extent: scene.extent });
    }
    let origin = [pose.x, pose.y, sensor.height];
    let (sin_t, cos_t) = pose.theta().sin_cos();
    let mut jitter_rng = (sensor.range_jitter_std > 0.0).then(|| {
        let mix = splitmix64(scene.seed)
            ^ splitmix64(pose.x.to_bits())
            ^ splitmix64(pose.y.to_bits().rotate_left(17))
            ^ splitmix64(pose.theta().to_bits().rotate_left(34));
        ChaCha8Rng::seed_from_u64(mix)
    });

    let mut points = Vec::new();
    for zi in 0..sensor.beams_zenith {
        let zenith = if sensor.beams_zenith == 1 {
            (sensor.zenith_min + sensor.zenith_max) / 2.0
        } else {
            sensor.zenith_min
                + zi as f64 * (sensor.zenith_max - sensor.zenith_min)
                    / (sensor.beams_zenith - 1) as f64
        };
        let (sin_z, cos_z) = zenith.sin_cos();
        for ai in 0..sensor.beams_azimuth {
            let azimuth = -std::f64::consts::PI
                + (ai as f64 + 0.5) * std::f64::consts::TAU / sensor.beams_azimuth as f64;
            let (sin_a, cos_a) = azimuth.sin_cos();
            let dir_sensor = [cos_z * cos_a, cos_z * sin_a, sin_z];
            let dir_world = [
                cos_t * dir_sensor[0] - sin_t * dir_sensor[1],
                sin_t * dir_sensor[0] + cos_t * dir_sensor[1],
                dir_sensor[2],
            ];

            let mut t_hit = f64::INFINITY;
            // Ground plane z = 0.
            if dir_world[2] < 0.0 {
                let t = -origin[2] / dir_world[2];
                if t >= MIN_RAY_T {
                    t_hit = t;
                }
            }
            for primitive in &scene.primitives {
                if let Some(t) = primitive.intersect(origin, dir_world) {
                    if t < t_hit {
                        t_hit = t;
                    }
                }
            }
            if let Some(rng) = jitter_rng.as_mut() {
                if t_hit.is_finite() {
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                    let gauss = (-2.0 * u1.ln()).sqrt() * u2.cos();
                    t_hit = (t_hit + gauss * sensor.range_jitter_std).max(MIN_RAY_T);
                }
            }
            if t_hit <= sensor.max_range {
                points.push(Point3::new(
                    t_hit * dir_sensor[0],
                    t_hit * dir_sensor[1],
                    t_hit * dir_sensor[2],
                ));
            }
        }
    }
    Ok(PointCloud::new(points)?)
}

/// An ordered pose sequence with timestamps and the query-to-map revisit
/// assignment it was constructed with.
#[derive(Debug, Clone)]
pub struct Trajectory {
    poses: Vec<PlanarPose>,
    timestamps: Vec<f64>,
    revisit_pairs: Vec<(usize, usize)>,
}

impl Trajectory {
    pub fn poses(&self) -> &[PlanarPose] {
        &self.poses
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    /// `(query index, map index)` pairs: each second-lap pose and the unique
    /// first-lap pose within the place radius.
    pub fn revisit_pairs(&self) -> &[(usize, usize)] {
        &self.revisit_pairs
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Two counter-clockwise laps around the corridor ring: lap one at the
    /// ring radius, lap two offset outward by `lap_offset` so each revisit
    /// pose sits a known small distance from its first-lap partner. Headings
    /// are tangential. `phase` rotates all stations, letting several
    /// trajectories share a scene without sharing poses.
    pub fn two_lap_ring(
        ring_radius: f64,
        poses_per_lap: usize,
        lap_offset: f64,
        phase: f64,
        place_radius: f64,
    ) -> Result<Trajectory, SynthError> {
        if !(lap_offset < place_radius) {
            return Err(SynthError::InvalidTrajectory(format!(
                "lap offset {lap_offset} must be below the place radius {place_radius}"
            )));
        }
        let mut trajectory = Trajectory::ring_laps(ring_radius, poses_per_lap, lap_offset, phase)?;
        trajectory.revisit_pairs = (0..poses_per_lap).map(|i| (poses_per_lap + i, i)).collect();
        trajectory.validate(place_radius)?;
        Ok(trajectory)
    }

    /// A dense multi-lap ring without a revisit assignment, for training
    /// data: poses cover a radial band around the ring with per-pose jitter
    /// and per-lap phase interleaving, so the sampler sees many distinct
    /// positions instead of a fixed station grid.
    pub fn dense_ring_laps(
        ring_radius: f64,
        poses_per_lap: usize,
        laps: usize,
        radial_spread: f64,
        jitter: f64,
        phase: f64,
        seed: u64,
    ) -> Result<Trajectory, SynthError> {
        if laps == 0 {
            return Err(SynthError::InvalidTrajectory("need at least one lap".into()));
        }
        if poses_per_lap < 4 {
            return Err(SynthError::InvalidTrajectory("need at least 4 poses per lap".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x6a17_7e52));
        let mut poses = Vec::with_capacity(laps * poses_per_lap);
        for lap in 0..laps {
            let base_radius = if laps > 1 {
                ring_radius + (lap as f64 / (laps - 1) as f64 - 0.5) * radial_spread
            } else {
                ring_radius
            };
            let lap_phase =
                phase + lap as f64 * std::f64::consts::TAU / (poses_per_lap * laps) as f64;
            for i in 0..poses_per_lap {
                let angle = lap_phase + i as f64 * std::f64::consts::TAU / poses_per_lap as f64;
                let radius = base_radius
                    + if jitter > 0.0 { rng.gen_range(-jitter..jitter) } else { 0.0 };
                poses.push(PlanarPose::new(
                    radius * angle.cos(),
                    radius * angle.sin(),
                    angle + std::f64::consts::FRAC_PI_2,
                ));
            }
        }
        let timestamps = (0..poses.len()).map(|i| i as f64 * 0.1).collect();
        let trajectory = Trajectory { poses, timestamps, revisit_pairs: Vec::new() };
        trajectory.validate(f64::INFINITY)?;
        Ok(trajectory)
    }

    fn ring_laps(
        ring_radius: f64,
        poses_per_lap: usize,
        lap_offset: f64,
        phase: f64,
    ) -> Result<Trajectory, SynthError> {
        if poses_per_lap < 4 {
            return Err(SynthError::InvalidTrajectory("need at least 4 poses per lap".into()));
        }
        if !(lap_offset > 0.0) {
            return Err(SynthError::InvalidTrajectory(format!(
                "lap offset {lap_offset} must be positive"
            )));
        }
        let mut poses = Vec::with_capacity(2 * poses_per_lap);
        for lap in 0..2 {
            let radius = ring_radius + lap as f64 * lap_offset;
            for i in 0..poses_per_lap {
                let angle = phase + i as f64 * std::f64::consts::TAU / poses_per_lap as f64;
                poses.push(PlanarPose::new(
                    radius * angle.cos(),
                    radius * angle.sin(),
                    angle + std::f64::consts::FRAC_PI_2,
                ));
            }
        }
        let timestamps = (0..poses.len()).map(|i| i as f64 * 0.1).collect();
        let trajectory = Trajectory { poses, timestamps, revisit_pairs: Vec::new() };
        trajectory.validate(f64::INFINITY)?;
        Ok(trajectory)
    }

    fn validate(&self, place_radius: f64) -> Result<(), SynthError> {
        for (i, w) in self.poses.windows(2).enumerate() {
            let d = w[0].distance(&w[1]);
            if d > 2.0 {
                return Err(SynthError::InvalidTrajectory(format!(
                    "consecutive poses {i} and {} are {d:.3} m apart (> 2 m)",
                    i + 1
                )));
            }
        }
        for &(query, map) in &self.revisit_pairs {
            let map_count = self
                .revisit_pairs
                .iter()
                .map(|&(_, m)| m)
                .filter(|&m| self.poses[query].distance(&self.poses[m]) < place_radius)
                .count();
            if map_count != 1 {
                return Err(SynthError::InvalidTrajectory(format!(
                    "query pose {query} has {map_count} map poses within {place_radius} m"
                )));
            }
            if self.poses[query].distance(&self.poses[map]) >= place_radius {
                return Err(SynthError::InvalidTrajectory(format!(
                    "revisit pair ({query}, {map}) violates the place radius"
                )));
            }
        }
        Ok(())
    }
}

/// Simulates one scan per trajectory pose and pairs it with the exact ground
/// truth. Record ids follow trajectory order.
pub fn generate_dataset(
    scene: &Scene,
    trajectory: &Trajectory,
    sensor: &SensorConfig,
) -> Result<Vec<ScanRecord>, SynthError> {
    let mut records = Vec::with_capacity(trajectory.len());
    for (id, pose) in trajectory.poses().iter().enumerate() {
        let cloud = simulate_scan(scene, pose, sensor)?;
        records.push(ScanRecord { id, cloud, gt_pose: *pose });
    }
    Ok(records)
}
