//! The descriptor-extraction network and yaw-estimation head.
//!
//! The trunk maps a range image to a 128-vector split into a place
//! descriptor `v` (trained to be rotation-invariant) and an orientation
//! descriptor `w` (trained to be rotation-variant). The yaw head maps the
//! concatenation of two orientation descriptors to a `(cos, sin)` encoding
//! of the yaw discrepancy between their scans; encoding the angle in the
//! plane avoids the wrap-around ambiguity at +/-180 degrees.

mod checkpoint;
mod train;

pub use checkpoint::CheckpointError;
pub use train::{augmented_yaw_target, train, BatchLoss, TrainConfig, TrainError, TrainOutput};

use crate::autodiff::{LayerSpec, NetError, Sequential, Tensor};
use crate::geometry::{normalize_angle, RangeImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The two 64-vectors extracted from one range image.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorPair {
    /// Place descriptor `v`: rotation-invariant, indexed by the map kd-tree.
    pub place: Vec<f64>,
    /// Orientation descriptor `w`: rotation-variant, input to the yaw head.
    pub orientation: Vec<f64>,
}

/// Architecture sizes. The defaults follow a small VGG-style stack: an
/// asymmetric input pool, three 3x3 convolutions with 2x2 pools between
/// them, and two fully connected layers whose output splits into the two
/// descriptors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    pub input_height: usize,
    pub input_width: usize,
    /// Asymmetric pool applied to the raw image (zenith x azimuth).
    pub input_pool: (usize, usize),
    pub conv_channels: [usize; 3],
    pub conv_kernel: (usize, usize),
    /// Pool after the first and second convolution blocks.
    pub mid_pool: (usize, usize),
    pub fc_units: usize,
    pub place_dim: usize,
    pub orientation_dim: usize,
    pub yaw_hidden: usize,
}

impl NetworkConfig {
    pub fn for_input(height: usize, width: usize) -> NetworkConfig {
        NetworkConfig {
            input_height: height,
            input_width: width,
            input_pool: (4, 1),
            conv_channels: [16, 32, 64],
            conv_kernel: (3, 3),
            mid_pool: (2, 2),
            fc_units: 256,
            place_dim: 64,
            orientation_dim: 64,
            yaw_hidden: 64,
        }
    }

    fn trunk_specs(&self) -> Result<Vec<LayerSpec>, NetError> {
        let (kh, kw) = self.conv_kernel;
        let [c1, c2, c3] = self.conv_channels;
        let mut specs = vec![
            LayerSpec::MaxPool2d { pool_h: self.input_pool.0, pool_w: self.input_pool.1 },
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: c1,
                kernel_h: kh,
                kernel_w: kw,
                stride: 1,
            },
            LayerSpec::PRelu { channels: c1 },
            LayerSpec::MaxPool2d { pool_h: self.mid_pool.0, pool_w: self.mid_pool.1 },
            LayerSpec::Conv2d {
                in_channels: c1,
                out_channels: c2,
                kernel_h: kh,
                kernel_w: kw,
                stride: 1,
            },
            LayerSpec::PRelu { channels: c2 },
            LayerSpec::MaxPool2d { pool_h: self.mid_pool.0, pool_w: self.mid_pool.1 },
            LayerSpec::Conv2d {
                in_channels: c2,
                out_channels: c3,
                kernel_h: kh,
                kernel_w: kw,
                stride: 1,
            },
            LayerSpec::PRelu { channels: c3 },
            LayerSpec::Flatten,
        ];
        // The first fully connected layer needs the flattened extent.
        let mut shape = vec![1, self.input_height, self.input_width];
        for spec in &specs {
            shape = spec.output_shape(&shape)?;
        }
        let flat = shape[0];
        specs.push(LayerSpec::FullyConnected { in_features: flat, out_features: self.fc_units });
        specs.push(LayerSpec::PRelu { channels: self.fc_units });
        specs.push(LayerSpec::FullyConnected {
            in_features: self.fc_units,
            out_features: self.place_dim + self.orientation_dim,
        });
        Ok(specs)
    }

    fn yaw_specs(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::FullyConnected {
                in_features: 2 * self.orientation_dim,
                out_features: self.yaw_hidden,
            },
            LayerSpec::PRelu { channels: self.yaw_hidden },
            LayerSpec::FullyConnected { in_features: self.yaw_hidden, out_features: 2 },
        ]
    }
}

/// Trunk plus yaw head with frozen or trainable parameters. Inference on a
/// shared instance is read-only and thread-safe.
#[derive(Debug, Clone)]
pub struct OreosNet {
    pub(crate) trunk: Sequential,
    pub(crate) yaw_head: Sequential,
    pub(crate) place_dim: usize,
    pub(crate) orientation_dim: usize,
}

impl OreosNet {
    pub fn new(config: &NetworkConfig, seed: u64) -> Result<OreosNet, NetError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = Sequential::new(
            vec![1, config.input_height, config.input_width],
            config.trunk_specs()?,
            &mut rng,
        )?;
        let yaw_head = Sequential::new(
            vec![2 * config.orientation_dim],
            config.yaw_specs(),
            &mut rng,
        )?;
        Ok(OreosNet {
            trunk,
            yaw_head,
            place_dim: config.place_dim,
            orientation_dim: config.orientation_dim,
        })
    }

    pub fn place_dim(&self) -> usize {
        self.place_dim
    }

    pub fn orientation_dim(&self) -> usize {
        self.orientation_dim
    }

    /// Expected range-image shape `(height, width)`.
    pub fn input_size(&self) -> (usize, usize) {
        let shape = self.trunk.input_shape();
        (shape[1], shape[2])
    }

    pub fn num_params(&self) -> usize {
        self.trunk.num_params() + self.yaw_head.num_params()
    }

    /// Runs the trunk on a range image and splits the output into the
    /// descriptor pair.
    pub fn extract(&self, image: &RangeImage) -> Result<DescriptorPair, NetError> {
        let input = image_to_tensor(image);
        let output = self.trunk.forward(&input)?;
        Ok(self.split_descriptors(output.data()))
    }

    pub(crate) fn split_descriptors(&self, trunk_output: &[f64]) -> DescriptorPair {
        DescriptorPair {
            place: trunk_output[..self.place_dim].to_vec(),
            orientation: trunk_output[self.place_dim..].to_vec(),
        }
    }

    /// Regresses the yaw discrepancy between the scans behind the two
    /// orientation descriptors: the angle by which the second scan's cloud
    /// must be rotated to align with the first. Always returns a value in
    /// `[-pi, pi)`.
    pub fn estimate_yaw(&self, w_a: &[f64], w_s: &[f64]) -> Result<f64, NetError> {
        if w_a.len() != self.orientation_dim || w_s.len() != self.orientation_dim {
            return Err(NetError::ShapeMismatch {
                context: "yaw estimation input".into(),
                expected: format!("two vectors of length {}", self.orientation_dim),
                actual: format!("lengths {} and {}", w_a.len(), w_s.len()),
            });
        }
        let mut joined = Vec::with_capacity(2 * self.orientation_dim);
        joined.extend_from_slice(w_a);
        joined.extend_from_slice(w_s);
        let y = self.yaw_head.forward(&Tensor::from_vec(joined))?;
        Ok(normalize_angle(y.data()[1].atan2(y.data()[0])))
    }
}

/// Copies a range image into a `(1, H, W)` network input tensor.
pub fn image_to_tensor(image: &RangeImage) -> Tensor {
    Tensor::new(vec![1, image.height(), image.width()], image.cells().to_vec())
        .expect("range image cells match its dimensions")
}

/// Hinged triplet loss over squared Euclidean distances:
/// `max(0, ||v_a - v_s||^2 - ||v_a - v_d||^2 + margin)`.
pub fn triplet_loss(v_a: &[f64], v_s: &[f64], v_d: &[f64], margin: f64) -> f64 {
    let d_p = squared_distance(v_a, v_s);
    let d_n = squared_distance(v_a, v_d);
    (d_p - d_n + margin).max(0.0)
}

/// Loss and gradients with respect to the three descriptors.
pub fn triplet_loss_grads(
    v_a: &[f64],
    v_s: &[f64],
    v_d: &[f64],
    margin: f64,
) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = v_a.len();
    let d_p = squared_distance(v_a, v_s);
    let d_n = squared_distance(v_a, v_d);
    let raw = d_p - d_n + margin;
    if raw <= 0.0 {
        return (0.0, vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    }
    let mut g_a = vec![0.0; n];
    let mut g_s = vec![0.0; n];
    let mut g_d = vec![0.0; n];
    for i in 0..n {
        g_a[i] = 2.0 * (v_d[i] - v_s[i]);
        g_s[i] = -2.0 * (v_a[i] - v_s[i]);
        g_d[i] = 2.0 * (v_a[i] - v_d[i]);
    }
    (raw, g_a, g_s, g_d)
}

/// The loss exactly as printed in its source formulation: the squared norms
/// are squared again and no hinge is applied, so the value can go negative.
/// Kept selectable for comparison; the hinged form is the default.
pub fn triplet_loss_literal(v_a: &[f64], v_s: &[f64], v_d: &[f64], margin: f64) -> f64 {
    let d_p = squared_distance(v_a, v_s);
    let d_n = squared_distance(v_a, v_d);
    d_p * d_p - d_n * d_n + margin
}

pub fn triplet_loss_literal_grads(
    v_a: &[f64],
    v_s: &[f64],
    v_d: &[f64],
    margin: f64,
) -> (f64, Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = v_a.len();
    let d_p = squared_distance(v_a, v_s);
    let d_n = squared_distance(v_a, v_d);
    let loss = d_p * d_p - d_n * d_n + margin;
    let mut g_a = vec![0.0; n];
    let mut g_s = vec![0.0; n];
    let mut g_d = vec![0.0; n];
    for i in 0..n {
        g_a[i] = 4.0 * (d_p * (v_a[i] - v_s[i]) - d_n * (v_a[i] - v_d[i]));
        g_s[i] = -4.0 * d_p * (v_a[i] - v_s[i]);
        g_d[i] = 4.0 * d_n * (v_a[i] - v_d[i]);
    }
    (loss, g_a, g_s, g_d)
}

/// Orientation regression loss against the planar encoding of the
/// ground-truth discrepancy:
/// `0.5 * ((y0 - cos(delta))^2 + (y1 - sin(delta))^2)`.
pub fn orientation_loss(y_yaw: [f64; 2], delta_theta_gt: f64) -> f64 {
    let (s, c) = delta_theta_gt.sin_cos();
    0.5 * ((y_yaw[0] - c).powi(2) + (y_yaw[1] - s).powi(2))
}

pub fn orientation_loss_grads(y_yaw: [f64; 2], delta_theta_gt: f64) -> (f64, [f64; 2]) {
    let (s, c) = delta_theta_gt.sin_cos();
    let g = [y_yaw[0] - c, y_yaw[1] - s];
    (0.5 * (g[0] * g[0] + g[1] * g[1]), g)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_scan, rotate_yaw, ProjectionConfig};
    use crate::synthworld::{generate_scene, simulate_scan, SensorConfig};
    use crate::geometry::PlanarPose;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn tiny_config() -> NetworkConfig {
        NetworkConfig {
            fc_units: 32,
            yaw_hidden: 16,
            conv_channels: [4, 8, 8],
            ..NetworkConfig::for_input(16, 48)
        }
    }

    fn test_projection() -> ProjectionConfig {
        ProjectionConfig::new(16, 48, -25f64.to_radians(), 5f64.to_radians(), 80.0).unwrap()
    }

    #[test]
    fn descriptor_dimensions_are_64_by_default() {
        let net = OreosNet::new(&NetworkConfig::for_input(16, 120), 1).unwrap();
        assert_eq!(net.place_dim(), 64);
        assert_eq!(net.orientation_dim(), 64);
        assert_eq!(net.trunk.output_shape(), &[128]);
    }

    #[test]
    fn extraction_is_deterministic() {
        let net = OreosNet::new(&tiny_config(), 2).unwrap();
        let scene = generate_scene(4, 40.0, 20).unwrap();
        let sensor = SensorConfig { beams_azimuth: 96, ..SensorConfig::default() };
        let cloud = simulate_scan(&scene, &PlanarPose::new(12.0, 0.0, 0.4), &sensor).unwrap();
        let img = project_scan(&cloud, &test_projection()).unwrap();
        let a = net.extract(&img).unwrap();
        let b = net.extract(&img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.place.len(), tiny_config().place_dim);
        assert_eq!(a.orientation.len(), tiny_config().orientation_dim);
    }

    #[test]
    fn wrong_image_shape_is_an_error() {
        let net = OreosNet::new(&tiny_config(), 2).unwrap();
        let cloud = simulate_scan(
            &generate_scene(4, 40.0, 10).unwrap(),
            &PlanarPose::new(12.0, 0.0, 0.0),
            &SensorConfig { beams_azimuth: 48, ..SensorConfig::default() },
        )
        .unwrap();
        let wrong = ProjectionConfig::new(8, 48, -0.5, 0.1, 80.0).unwrap();
        let img = project_scan(&cloud, &wrong).unwrap();
        assert!(matches!(net.extract(&img), Err(NetError::ShapeMismatch { .. })));
    }

    #[test]
    fn full_period_shift_leaves_descriptors_bit_identical() {
        let net = OreosNet::new(&tiny_config(), 3).unwrap();
        let scene = generate_scene(4, 40.0, 20).unwrap();
        let sensor = SensorConfig { beams_azimuth: 96, ..SensorConfig::default() };
        let cloud = simulate_scan(&scene, &PlanarPose::new(12.0, 0.0, 1.0), &sensor).unwrap();
        let img = project_scan(&cloud, &test_projection()).unwrap();
        let shifted = img.shift_columns(img.width() as i64);
        assert_eq!(net.extract(&img).unwrap(), net.extract(&shifted).unwrap());
    }

    #[test]
    fn triplet_loss_identities() {
        let v: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(triplet_loss(&v, &v, &v, 0.5), 0.5);

        // Dissimilar far beyond the margin: the hinge clamps to zero.
        let far: Vec<f64> = v.iter().map(|x| x + 10.0).collect();
        assert_eq!(triplet_loss(&v, &v, &far, 0.5), 0.0);
    }

    #[test]
    fn triplet_loss_matches_scalar_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let v_a: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v_s: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v_d: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m = rng.gen_range(0.1..2.0);

            let mut d_p = 0.0;
            let mut d_n = 0.0;
            for i in 0..64 {
                d_p += (v_a[i] - v_s[i]) * (v_a[i] - v_s[i]);
                d_n += (v_a[i] - v_d[i]) * (v_a[i] - v_d[i]);
            }
            let expected = if d_p - d_n + m > 0.0 { d_p - d_n + m } else { 0.0 };
            assert_abs_diff_eq!(triplet_loss(&v_a, &v_s, &v_d, m), expected, epsilon = 1e-12);
            assert_abs_diff_eq!(
                triplet_loss_literal(&v_a, &v_s, &v_d, m),
                d_p * d_p - d_n * d_n + m,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn orientation_loss_identities() {
        for delta in [-3.0f64, -0.7, 0.0, 1.3, 3.1] {
            assert_eq!(orientation_loss([delta.cos(), delta.sin()], delta), 0.0);
            let half = orientation_loss([0.0, 0.0], delta);
            assert_abs_diff_eq!(half, 0.5, epsilon = 1e-15);
        }
        assert_eq!(orientation_loss([0.0, 1.0], 0.0), 1.0);
    }

    #[test]
    fn yaw_estimate_is_always_in_range() {
        let net = OreosNet::new(&tiny_config(), 5).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let dim = net.orientation_dim();
        for _ in 0..50 {
            let w_a: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let w_s: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let yaw = net.estimate_yaw(&w_a, &w_s).unwrap();
            assert!((-std::f64::consts::PI..std::f64::consts::PI).contains(&yaw));
        }
    }

    #[test]
    fn yaw_of_unit_cos_vector_is_zero() {
        // atan2(0, 1) = 0: the head output (1, 0) decodes to zero yaw.
        assert_eq!(normalize_angle(0f64.atan2(1.0)), 0.0);
    }

    #[test]
    fn augmentation_target_matches_cloud_space_registration() {
        // Oracle: scan the same spot under two headings, augment both scans
        // by random yaw rotations, then recover the alignment angle between
        // the augmented clouds by exhaustive search over projections. The
        // bookkeeping formula must agree with the recovered angle.
        let scene = generate_scene(27, 40.0, 30).unwrap();
        let sensor = SensorConfig { beams_azimuth: 360, ..SensorConfig::default() };
        let proj = ProjectionConfig::new(16, 120, -25f64.to_radians(), 5f64.to_radians(), 80.0)
            .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let position = (scene.ring_radius(), 0.0);
        for _ in 0..4 {
            let theta_a = rng.gen_range(-3.0..3.0);
            let theta_s = rng.gen_range(-3.0..3.0);
            let delta_a = rng.gen_range(-3.0..3.0);
            let delta_s = rng.gen_range(-3.0..3.0);
            let scan_a = simulate_scan(
                &scene,
                &PlanarPose::new(position.0, position.1, theta_a),
                &sensor,
            )
            .unwrap();
            let scan_s = simulate_scan(
                &scene,
                &PlanarPose::new(position.0, position.1, theta_s),
                &sensor,
            )
            .unwrap();
            let aug_a = rotate_yaw(&scan_a, delta_a);
            let aug_s = rotate_yaw(&scan_s, delta_s);
            let img_a = project_scan(&aug_a, &proj).unwrap();

            // Exhaustive rotation search at one-column granularity.
            let mut best = (f64::INFINITY, 0.0);
            let w = proj.width as i64;
            for k in 0..w {
                let angle = k as f64 * std::f64::consts::TAU / w as f64;
                let img_g = project_scan(&rotate_yaw(&aug_s, angle), &proj).unwrap();
                let cost: f64 = img_a
                    .cells()
                    .iter()
                    .zip(img_g.cells())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                if cost < best.0 {
                    best = (cost, normalize_angle(angle));
                }
            }
            let delta_theta_gt = normalize_angle(theta_s - theta_a);
            let expected = augmented_yaw_target(delta_theta_gt, delta_a, delta_s);
            let diff = normalize_angle(best.1 - expected).abs();
            assert!(
                diff <= 2.0 * std::f64::consts::TAU / w as f64,
                "registration found {:.4}, bookkeeping says {expected:.4}",
                best.1
            );
        }
    }

    #[test]
    fn yaw_targets_are_antisymmetric() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = rng.gen_range(-3.1..3.1);
            let s = rng.gen_range(-3.1..3.1);
            let fwd = normalize_angle(s - a);
            let back = normalize_angle(a - s);
            assert_abs_diff_eq!(normalize_angle(fwd + back), 0.0, epsilon = 1e-12);
        }
    }
}
