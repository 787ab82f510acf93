//! Dataset ingestion and sampling: odometry-format binary scans, 3x4 pose
//! files, plain-text manifests, triplet sampling with two-stage
//! hard-negative mining, and the map/query split.
//!
//! On-disk layout:
//! - scans: `<id:06>.bin`, packed little-endian 32-bit float quadruples
//!   `(x, y, z, reflectance)`;
//! - poses: one line per scan, 12 ASCII reals, the row-major 3x4 rigid
//!   transform of the sensor in the world frame;
//! - manifest: `key=value` lines naming the scan directory, pose file and
//!   sampling parameters.

use crate::geometry::{normalize_angle, PlanarPose, Point3, PointCloud};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: truncated scan file at byte {offset}; size must be a multiple of 16")]
    TruncatedScan { path: PathBuf, offset: u64 },
    #[error("{path}: scan file holds no points")]
    EmptyScan { path: PathBuf },
    #[error("{path}: non-finite value in record {record}")]
    NonFiniteValue { path: PathBuf, record: usize },
    #[error("{path}: reflectance {value} in record {record} outside [0, 1]")]
    ReflectanceOutOfRange { path: PathBuf, record: usize, value: f64 },
    #[error("{path}:{line}: malformed pose line: {reason}")]
    MalformedPose { path: PathBuf, line: usize, reason: String },
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
    #[error("scan count {scans} does not match pose count {poses}")]
    CountMismatch { scans: usize, poses: usize },
    #[error("triplet sampling failed: {0}")]
    Sampling(String),
    #[error("map/query split failed: {0}")]
    Split(String),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
}

/// One scan with its ground-truth planar pose. Ids are dense indices in
/// dataset order.
#[derive(Debug, Clone)]
pub struct ScanRecord {
    pub id: usize,
    pub cloud: PointCloud,
    pub gt_pose: PlanarPose,
}

/// One anchor / similar / dissimilar triple, identified by record ids,
/// with the ground-truth yaw discrepancy from anchor to similar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TripletSample {
    pub anchor: usize,
    pub similar: usize,
    pub dissimilar: usize,
    /// `normalize(theta_similar - theta_anchor)`.
    pub delta_theta_gt: f64,
}

/// The mining stage controlling where dissimilar samples come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiningStage {
    /// Dissimilar anywhere beyond the similar radius.
    Random,
    /// Dissimilar within the hard-negative band close to the anchor.
    HardNegative,
}

/// Distance thresholds for triplet sampling and the map/query split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    /// Two scans are the same place when their poses are closer than this.
    pub similar_radius: f64,
    /// Hard negatives are drawn from this distance band around the anchor.
    pub stage2_band: (f64, f64),
    /// Minimum pairwise distance between selected queries.
    pub query_spacing: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { similar_radius: 1.5, stage2_band: (2.0, 5.0), query_spacing: 3.0 }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.similar_radius > 0.0) {
            return Err(DatasetError::Sampling("similar_radius must be positive".into()));
        }
        if !(self.similar_radius < self.stage2_band.0) {
            return Err(DatasetError::Sampling(
                "similar_radius must be below the hard-negative band".into(),
            ));
        }
        if !(self.stage2_band.0 < self.stage2_band.1) {
            return Err(DatasetError::Sampling("hard-negative band is empty".into()));
        }
        if !(self.query_spacing > 0.0) {
            return Err(DatasetError::Sampling("query_spacing must be positive".into()));
        }
        Ok(())
    }
}

/// Reads a packed binary scan: consecutive 16-byte groups of four
/// little-endian `f32` values `(x, y, z, reflectance)`.
pub fn load_kitti_scan(path: &Path) -> Result<PointCloud, DatasetError> {
    let io_err = |source| DatasetError::Io { path: path.to_path_buf(), source };
    let mut file = std::fs::File::open(path).map_err(io_err)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(io_err)?;
    if bytes.len() % 16 != 0 {
        return Err(DatasetError::TruncatedScan {
            path: path.to_path_buf(),
            offset: (bytes.len() - bytes.len() % 16) as u64,
        });
    }
    if bytes.is_empty() {
        return Err(DatasetError::EmptyScan { path: path.to_path_buf() });
    }
    let mut points = Vec::with_capacity(bytes.len() / 16);
    let mut intensities = Vec::with_capacity(bytes.len() / 16);
    for (record, chunk) in bytes.chunks_exact(16).enumerate() {
        let mut values = [0f64; 4];
        for (i, v) in values.iter_mut().enumerate() {
            let raw: [u8; 4] = chunk[i * 4..(i + 1) * 4].try_into().unwrap();
            *v = f32::from_le_bytes(raw) as f64;
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::NonFiniteValue { path: path.to_path_buf(), record });
        }
        if !(0.0..=1.0).contains(&values[3]) {
            return Err(DatasetError::ReflectanceOutOfRange {
                path: path.to_path_buf(),
                record,
                value: values[3],
            });
        }
        points.push(Point3::new(values[0], values[1], values[2]));
        intensities.push(values[3]);
    }
    Ok(PointCloud::with_intensities(points, intensities)?)
}

/// Writes a cloud in the binary scan layout. Coordinates are narrowed to
/// `f32`; a missing intensity channel is stored as zeros.
pub fn save_kitti_scan(path: &Path, cloud: &PointCloud) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io { path: path.to_path_buf(), source };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    for (i, p) in cloud.points().iter().enumerate() {
        let reflectance = cloud.intensities().map_or(0.0, |v| v[i]);
        for value in [p.x, p.y, p.z, reflectance] {
            writer.write_all(&(value as f32).to_le_bytes()).map_err(io_err)?;
        }
    }
    writer.flush().map_err(io_err)
}

/// Parses a pose file: per line, 12 reals forming a row-major 3x4 rigid
/// transform. The planar pose keeps the ground-plane translation and the
/// heading of the rotated forward axis.
pub fn load_pose_file(path: &Path) -> Result<Vec<PlanarPose>, DatasetError> {
    let io_err = |source| DatasetError::Io { path: path.to_path_buf(), source };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let reader = BufReader::new(file);
    let mut poses = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 12 {
            return Err(DatasetError::MalformedPose {
                path: path.to_path_buf(),
                line: idx + 1,
                reason: format!("expected 12 values, found {}", fields.len()),
            });
        }
        let mut m = [0f64; 12];
        for (i, f) in fields.iter().enumerate() {
            m[i] = f.parse().map_err(|e| DatasetError::MalformedPose {
                path: path.to_path_buf(),
                line: idx + 1,
                reason: format!("field {i}: {e}"),
            })?;
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(DatasetError::MalformedPose {
                path: path.to_path_buf(),
                line: idx + 1,
                reason: "non-finite value".into(),
            });
        }
        // Row-major 3x4: [r00 r01 r02 tx; r10 r11 r12 ty; r20 r21 r22 tz].
        poses.push(PlanarPose::new(m[3], m[7], m[4].atan2(m[0])));
    }
    Ok(poses)
}

/// Writes poses as 3x4 rigid transforms (yaw rotation about the vertical
/// axis, zero elevation). Values use the shortest round-trip decimal form.
pub fn save_pose_file(path: &Path, poses: &[PlanarPose]) -> Result<(), DatasetError> {
    let io_err = |source| DatasetError::Io { path: path.to_path_buf(), source };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    for pose in poses {
        let (s, c) = pose.theta().sin_cos();
        writeln!(writer, "{} {} 0 {} {} {} 0 {} 0 0 1 0", c, -s, pose.x, s, c, pose.y)
            .map_err(io_err)?;
    }
    writer.flush().map_err(io_err)
}

/// A parsed dataset manifest; paths are resolved against the manifest's
/// directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub scan_dir: PathBuf,
    pub pose_file: PathBuf,
    pub sampling: SamplingConfig,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<DatasetManifest, DatasetError> {
        let io_err = |source| DatasetError::Io { path: path.to_path_buf(), source };
        let text = std::fs::read_to_string(path).map_err(io_err)?;
        let mut fields = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| DatasetError::Manifest {
                path: path.to_path_buf(),
                reason: format!("line {}: expected key=value", idx + 1),
            })?;
            fields.insert(key.trim().to_string(), value.trim().to_string());
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let get = |key: &str| {
            fields.get(key).cloned().ok_or_else(|| DatasetError::Manifest {
                path: path.to_path_buf(),
                reason: format!("missing key {key}"),
            })
        };
        let num = |key: &str| -> Result<f64, DatasetError> {
            get(key)?.parse().map_err(|e| DatasetError::Manifest {
                path: path.to_path_buf(),
                reason: format!("key {key}: {e}"),
            })
        };
        Ok(DatasetManifest {
            scan_dir: base.join(get("scan_dir")?),
            pose_file: base.join(get("pose_file")?),
            sampling: SamplingConfig {
                similar_radius: num("similar_radius")?,
                stage2_band: (num("stage2_min")?, num("stage2_max")?),
                query_spacing: num("query_spacing")?,
            },
        })
    }

    pub fn save(&self, path: &Path, scan_dir_name: &str, pose_file_name: &str) -> Result<(), DatasetError> {
        let io_err = |source| DatasetError::Io { path: path.to_path_buf(), source };
        let mut text = String::new();
        text.push_str(&format!("scan_dir={scan_dir_name}\n"));
        text.push_str(&format!("pose_file={pose_file_name}\n"));
        text.push_str(&format!("similar_radius={}\n", self.sampling.similar_radius));
        text.push_str(&format!("stage2_min={}\n", self.sampling.stage2_band.0));
        text.push_str(&format!("stage2_max={}\n", self.sampling.stage2_band.1));
        text.push_str(&format!("query_spacing={}\n", self.sampling.query_spacing));
        std::fs::write(path, text).map_err(io_err)
    }
}

/// Loads every scan named by the manifest (`000000.bin`, `000001.bin`, ...)
/// together with its pose line.
pub fn load_dataset(manifest_path: &Path) -> Result<(Vec<ScanRecord>, SamplingConfig), DatasetError> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let poses = load_pose_file(&manifest.pose_file)?;
    let mut records = Vec::with_capacity(poses.len());
    for (id, pose) in poses.iter().enumerate() {
        let scan_path = manifest.scan_dir.join(format!("{id:06}.bin"));
        let cloud = load_kitti_scan(&scan_path)?;
        records.push(ScanRecord { id, cloud, gt_pose: *pose });
    }
    if records.is_empty() {
        return Err(DatasetError::CountMismatch { scans: 0, poses: poses.len() });
    }
    Ok((records, manifest.sampling))
}

/// Writes records as a loadable dataset directory: `scans/`, `poses.txt`
/// and `manifest.txt`.
pub fn save_dataset(
    dir: &Path,
    records: &[ScanRecord],
    sampling: &SamplingConfig,
) -> Result<PathBuf, DatasetError> {
    let io_err = |source| DatasetError::Io { path: dir.to_path_buf(), source };
    let scan_dir = dir.join("scans");
    std::fs::create_dir_all(&scan_dir).map_err(io_err)?;
    for record in records {
        save_kitti_scan(&scan_dir.join(format!("{:06}.bin", record.id)), &record.cloud)?;
    }
    let poses: Vec<PlanarPose> = records.iter().map(|r| r.gt_pose).collect();
    save_pose_file(&dir.join("poses.txt"), &poses)?;
    let manifest_path = dir.join("manifest.txt");
    let manifest = DatasetManifest {
        scan_dir: scan_dir.clone(),
        pose_file: dir.join("poses.txt"),
        sampling: *sampling,
    };
    manifest.save(&manifest_path, "scans", "poses.txt")?;
    Ok(manifest_path)
}

fn pose_distance(records: &[ScanRecord], a: usize, b: usize) -> f64 {
    records[a].gt_pose.distance(&records[b].gt_pose)
}

/// Draws `count` triplets. Similar partners lie within the similar radius of
/// the anchor; dissimilar partners obey the stage's distance rule. Sampling
/// is uniform over the valid candidates and deterministic per seed.
pub fn sample_triplets(
    records: &[ScanRecord],
    config: &SamplingConfig,
    stage: MiningStage,
    count: usize,
    rng_seed: u64,
) -> Result<Vec<TripletSample>, DatasetError> {
    config.validate()?;
    if records.len() < 3 {
        return Err(DatasetError::Sampling(format!(
            "need at least 3 records, got {}",
            records.len()
        )));
    }
    let n = records.len();
    let mut anchors = Vec::new();
    let mut similar_sets: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut dissimilar_sets: Vec<Vec<usize>> = Vec::with_capacity(n);
    for a in 0..n {
        let mut similars = Vec::new();
        let mut dissimilars = Vec::new();
        for b in 0..n {
            if a == b {
                continue;
            }
            let d = pose_distance(records, a, b);
            if d < config.similar_radius {
                similars.push(b);
            }
            let valid_negative = match stage {
                MiningStage::Random => d >= config.similar_radius,
                MiningStage::HardNegative => {
                    d >= config.stage2_band.0 && d <= config.stage2_band.1
                }
            };
            if valid_negative {
                dissimilars.push(b);
            }
        }
        if !similars.is_empty() && !dissimilars.is_empty() {
            anchors.push(a);
        }
        similar_sets.push(similars);
        dissimilar_sets.push(dissimilars);
    }
    if anchors.is_empty() {
        let band = match stage {
            MiningStage::Random => format!("beyond {} m", config.similar_radius),
            MiningStage::HardNegative => {
                format!("in [{}, {}] m", config.stage2_band.0, config.stage2_band.1)
            }
        };
        return Err(DatasetError::Sampling(format!(
            "no anchor has both a similar record within {} m and a dissimilar record {band}",
            config.similar_radius
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut triplets = Vec::with_capacity(count);
    for _ in 0..count {
        let anchor = anchors[rng.gen_range(0..anchors.len())];
        let similar = similar_sets[anchor][rng.gen_range(0..similar_sets[anchor].len())];
        let dissimilar =
            dissimilar_sets[anchor][rng.gen_range(0..dissimilar_sets[anchor].len())];
        let delta_theta_gt =
            normalize_angle(records[similar].gt_pose.theta() - records[anchor].gt_pose.theta());
        triplets.push(TripletSample { anchor, similar, dissimilar, delta_theta_gt });
    }
    Ok(triplets)
}

/// How far the sensor must travel before coming back within the similar
/// radius counts as a revisit, expressed as a multiple of the query spacing.
const REVISIT_TRAVEL_FACTOR: f64 = 4.0;

/// Splits records (in time order) into a map prefix and a query suffix.
///
/// The split point is the first record that revisits a place seen earlier:
/// closer than the similar radius to some previous record despite having
/// traveled well away in between. Queries are then greedily selected from
/// the suffix so that each has exactly one map record within the similar
/// radius and queries stay at least `query_spacing` apart. Returns
/// `(map ids, query ids)`.
pub fn split_map_query(
    records: &[ScanRecord],
    config: &SamplingConfig,
) -> Result<(Vec<usize>, Vec<usize>), DatasetError> {
    config.validate()?;
    if records.len() < 2 {
        return Err(DatasetError::Split("need at least 2 records".into()));
    }
    let min_travel = REVISIT_TRAVEL_FACTOR * config.query_spacing;
    let mut travel = vec![0.0f64; records.len()];
    for i in 1..records.len() {
        travel[i] = travel[i - 1] + pose_distance(records, i - 1, i);
    }
    let mut split = None;
    'outer: for i in 1..records.len() {
        for j in 0..i {
            if travel[i] - travel[j] > min_travel
                && pose_distance(records, i, j) < config.similar_radius
            {
                split = Some(i);
                break 'outer;
            }
        }
    }
    let split = split.ok_or_else(|| {
        DatasetError::Split(format!(
            "no revisit found: no record comes within {} m of a record more than {:.1} m of travel earlier",
            config.similar_radius, min_travel
        ))
    })?;

    let map_ids: Vec<usize> = (0..split).map(|i| records[i].id).collect();
    let mut query_ids: Vec<usize> = Vec::new();
    let mut accepted: Vec<usize> = Vec::new();
    for i in split..records.len() {
        let within = (0..split)
            .filter(|&j| pose_distance(records, i, j) < config.similar_radius)
            .count();
        if within != 1 {
            continue;
        }
        if accepted.iter().any(|&q| pose_distance(records, i, q) < config.query_spacing) {
            continue;
        }
        accepted.push(i);
        query_ids.push(records[i].id);
    }
    if query_ids.is_empty() {
        return Err(DatasetError::Split("insufficient revisits: no valid query".into()));
    }
    Ok((map_ids, query_ids))
}
