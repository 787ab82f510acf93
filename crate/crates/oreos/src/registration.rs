//! Point-to-plane ICP constrained to the ground plane (x, y, theta), with
//! PCA normal estimation on the target cloud.

use crate::geometry::{normalize_angle, PlanarPose, PointCloud};
use crate::kdtree::KdTree;
use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("target cloud has {points} points, fewer than the {required} needed for normals")]
    TooFewPoints { points: usize, required: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Correspondences farther than this are dropped, in meters.
    pub max_correspondence_dist: f64,
    /// Convergence: translation update below this, in meters.
    pub translation_epsilon: f64,
    /// Convergence: rotation update below this, in radians.
    pub rotation_epsilon: f64,
    /// Neighborhood size for normal estimation.
    pub normal_neighbors: usize,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iterations: 50,
            max_correspondence_dist: 1.0,
            translation_epsilon: 1e-4,
            rotation_epsilon: 1e-4,
            normal_neighbors: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IcpResult {
    pub pose: PlanarPose,
    pub converged: bool,
    pub iterations: usize,
    /// Mean absolute point-to-plane residual under the final pose, meters.
    pub mean_residual: f64,
}

/// Per-point unit normals from the covariance of the k nearest neighbors;
/// the smallest-eigenvector direction, oriented toward the sensor origin.
/// Degenerate neighborhoods (rank < 2, e.g. collinear points) yield `None`.
pub fn estimate_normals(cloud: &PointCloud, neighbors: usize) -> Result<Vec<Option<[f64; 3]>>, RegistrationError> {
    let n = cloud.len();
    if n < neighbors {
        return Err(RegistrationError::TooFewPoints { points: n, required: neighbors });
    }
    let mut flat = Vec::with_capacity(3 * n);
    for p in cloud.points() {
        flat.extend_from_slice(&[p.x, p.y, p.z]);
    }
    let tree = KdTree::build(3, flat);
    let mut normals = Vec::with_capacity(n);
    for p in cloud.points() {
        let hits = tree.knn(&[p.x, p.y, p.z], neighbors);
        let mut mean = Vector3::zeros();
        for &(idx, _) in &hits {
            let q = cloud.points()[idx];
            mean += Vector3::new(q.x, q.y, q.z);
        }
        mean /= hits.len() as f64;
        let mut cov = Matrix3::zeros();
        for &(idx, _) in &hits {
            let q = cloud.points()[idx];
            let d = Vector3::new(q.x, q.y, q.z) - mean;
            cov += d * d.transpose();
        }
        cov /= hits.len() as f64;
        let eig = cov.symmetric_eigen();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
        let [lo, mid, hi] = order;
        // Rank < 2: the two smallest eigenvalues vanish (collinear or
        // coincident neighborhood), leaving the normal direction undefined.
        if eig.eigenvalues[hi] <= 0.0 || eig.eigenvalues[mid] <= 1e-9 * eig.eigenvalues[hi] {
            normals.push(None);
            continue;
        }
        let mut normal = eig.eigenvectors.column(lo).into_owned();
        normal /= normal.norm();
        // Point the normal from the surface toward the sensor origin.
        if normal.dot(&Vector3::new(p.x, p.y, p.z)) > 0.0 {
            normal = -normal;
        }
        normals.push(Some([normal.x, normal.y, normal.z]));
    }
    Ok(normals)
}

/// A registration target with precomputed normals and search tree, reusable
/// across queries.
#[derive(Debug, Clone)]
pub struct IcpTarget {
    points: Vec<[f64; 3]>,
    normals: Vec<Option<[f64; 3]>>,
    tree: KdTree,
}

impl IcpTarget {
    pub fn new(cloud: &PointCloud, config: &IcpConfig) -> Result<IcpTarget, RegistrationError> {
        let normals = estimate_normals(cloud, config.normal_neighbors)?;
        let points: Vec<[f64; 3]> = cloud.points().iter().map(|p| [p.x, p.y, p.z]).collect();
        let flat: Vec<f64> = points.iter().flatten().copied().collect();
        let tree = KdTree::build(3, flat);
        Ok(IcpTarget { points, normals, tree })
    }
}

const MIN_CORRESPONDENCES: usize = 10;

/// Point-to-plane ICP over (x, y, theta). Each iteration matches every
/// transformed query point to its nearest target point within the distance
/// cap, solves the linearized 3x3 normal equations, and applies the update;
/// convergence means the update dropped below both epsilons.
pub fn icp_point_to_plane(
    query: &PointCloud,
    target: &IcpTarget,
    initial: &PlanarPose,
    config: &IcpConfig,
) -> IcpResult {
    let mut pose = *initial;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..config.max_iterations {
        iterations += 1;
        let (sin_t, cos_t) = pose.theta().sin_cos();
        let mut ata = Matrix3::zeros();
        let mut atb = Vector3::zeros();
        let mut count = 0usize;
        for q in query.points() {
            let tx = cos_t * q.x - sin_t * q.y + pose.x;
            let ty = sin_t * q.x + cos_t * q.y + pose.y;
            let tz = q.z;
            let (idx, dist) = target.tree.nearest(&[tx, ty, tz]);
            if dist > config.max_correspondence_dist {
                continue;
            }
            let Some(normal) = target.normals[idx] else { continue };
            let p = target.points[idx];
            let residual =
                normal[0] * (tx - p[0]) + normal[1] * (ty - p[1]) + normal[2] * (tz - p[2]);
            // d(transformed)/dtheta projected on the normal.
            let rot_x = -sin_t * q.x - cos_t * q.y;
            let rot_y = cos_t * q.x - sin_t * q.y;
            let jac = Vector3::new(normal[0], normal[1], normal[0] * rot_x + normal[1] * rot_y);
            ata += jac * jac.transpose();
            atb += jac * residual;
            count += 1;
        }
        if count < MIN_CORRESPONDENCES {
            return IcpResult {
                pose,
                converged: false,
                iterations,
                mean_residual: mean_abs_residual(query, target, &pose, config),
            };
        }
        let Some(update) = solve_3x3(&ata, &(-atb)) else {
            return IcpResult {
                pose,
                converged: false,
                iterations,
                mean_residual: mean_abs_residual(query, target, &pose, config),
            };
        };
        pose = PlanarPose::new(pose.x + update.x, pose.y + update.y, pose.theta() + update.z);
        if update.x.abs() < config.translation_epsilon
            && update.y.abs() < config.translation_epsilon
            && normalize_angle(update.z).abs() < config.rotation_epsilon
        {
            converged = true;
            break;
        }
    }

    IcpResult {
        pose,
        converged,
        iterations,
        mean_residual: mean_abs_residual(query, target, &pose, config),
    }
}

fn solve_3x3(a: &Matrix3<f64>, b: &Vector3<f64>) -> Option<Vector3<f64>> {
    a.cholesky().map(|c| c.solve(b)).or_else(|| a.try_inverse().map(|inv| inv * b))
}

fn mean_abs_residual(
    query: &PointCloud,
    target: &IcpTarget,
    pose: &PlanarPose,
    config: &IcpConfig,
) -> f64 {
    let (sin_t, cos_t) = pose.theta().sin_cos();
    let mut sum = 0.0;
    let mut count = 0usize;
    for q in query.points() {
        let tx = cos_t * q.x - sin_t * q.y + pose.x;
        let ty = sin_t * q.x + cos_t * q.y + pose.y;
        let tz = q.z;
        let (idx, dist) = target.tree.nearest(&[tx, ty, tz]);
        if dist > config.max_correspondence_dist {
            continue;
        }
        let Some(normal) = target.normals[idx] else { continue };
        let p = target.points[idx];
        sum += (normal[0] * (tx - p[0]) + normal[1] * (ty - p[1]) + normal[2] * (tz - p[2])).abs();
        count += 1;
    }
    if count == 0 {
        f64::INFINITY
    } else {
        sum / count as f64
    }
}
