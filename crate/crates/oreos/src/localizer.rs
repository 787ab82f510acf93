//! Descriptor map construction, place retrieval, and the full localization
//! pipeline: project, extract descriptors, retrieve candidates over `v`,
//! regress the yaw discrepancy from `w`, refine with point-to-plane ICP.
//!
//! Map file layout (little-endian):
//!
//! ```text
//! magic        8 bytes  "OREOMAP1"
//! version      u32      currently 1
//! place_dim    u32
//! orient_dim   u32
//! entry_count  u64
//! per entry:   u64 id, f64 x, f64 y,
//!              place_dim f64 (v), orient_dim f64 (w)
//! ```
//!
//! The kd-tree over `v` is rebuilt on load.

use crate::geometry::{PlanarPose, PointCloud, ProjectionConfig};
use crate::kdtree::KdTree;
use crate::net::OreosNet;
use crate::registration::{icp_point_to_plane, IcpConfig, IcpTarget};
use crate::dataset::ScanRecord;
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

const MAP_MAGIC: &[u8; 8] = b"OREOMAP1";
const MAP_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LocalizerError {
    #[error("descriptor map must contain at least one entry")]
    EmptyMap,
    #[error("k = {k} out of range: map holds {size} entries")]
    KOutOfRange { k: usize, size: usize },
    #[error("duplicate map entry id {id}")]
    DuplicateId { id: usize },
    #[error("map entry {id}: descriptor length {actual}, expected {expected}")]
    DescriptorLength { id: usize, expected: usize, actual: usize },
    #[error("no scan record for map entry id {id}")]
    MissingRecord { id: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a descriptor map (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported map version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: corrupt map file: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error(transparent)]
    Net(#[from] crate::autodiff::NetError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Registration(#[from] crate::registration::RegistrationError),
}

/// One mapped place: its id, ground-plane position, and the two descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct MapEntry {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub place: Vec<f64>,
    pub orientation: Vec<f64>,
}

/// Immutable descriptor map with an exact kd-tree over the place vectors.
/// Entries are kept sorted by id so retrieval ties resolve to the lower id.
#[derive(Debug, Clone)]
pub struct DescriptorMap {
    entries: Vec<MapEntry>,
    place_dim: usize,
    orientation_dim: usize,
    tree: KdTree,
}

impl DescriptorMap {
    pub fn build(mut entries: Vec<MapEntry>) -> Result<DescriptorMap, LocalizerError> {
        if entries.is_empty() {
            return Err(LocalizerError::EmptyMap);
        }
        entries.sort_by_key(|e| e.id);
        for pair in entries.windows(2) {
            if pair[0].id == pair[1].id {
                return Err(LocalizerError::DuplicateId { id: pair[0].id });
            }
        }
        let place_dim = entries[0].place.len();
        let orientation_dim = entries[0].orientation.len();
        let mut flat = Vec::with_capacity(entries.len() * place_dim);
        for entry in &entries {
            if entry.place.len() != place_dim {
                return Err(LocalizerError::DescriptorLength {
                    id: entry.id,
                    expected: place_dim,
                    actual: entry.place.len(),
                });
            }
            if entry.orientation.len() != orientation_dim {
                return Err(LocalizerError::DescriptorLength {
                    id: entry.id,
                    expected: orientation_dim,
                    actual: entry.orientation.len(),
                });
            }
            flat.extend_from_slice(&entry.place);
        }
        let tree = KdTree::build(place_dim, flat);
        Ok(DescriptorMap { entries, place_dim, orientation_dim, tree })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MapEntry] {
        &self.entries
    }

    pub fn entry_by_id(&self, id: usize) -> Option<&MapEntry> {
        self.entries.binary_search_by_key(&id, |e| e.id).ok().map(|i| &self.entries[i])
    }

    pub fn place_dim(&self) -> usize {
        self.place_dim
    }

    /// Exact k nearest entries to `v` by Euclidean distance over the place
    /// descriptors, ascending, distance ties broken by lower id.
    pub fn query_knn(&self, v: &[f64], k: usize) -> Result<Vec<(usize, f64)>, LocalizerError> {
        if k < 1 || k > self.entries.len() {
            return Err(LocalizerError::KOutOfRange { k, size: self.entries.len() });
        }
        if v.len() != self.place_dim {
            return Err(LocalizerError::DescriptorLength {
                id: usize::MAX,
                expected: self.place_dim,
                actual: v.len(),
            });
        }
        Ok(self
            .tree
            .knn(v, k)
            .into_iter()
            .map(|(pos, dist)| (self.entries[pos].id, dist))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), LocalizerError> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAP_MAGIC);
        bytes.extend_from_slice(&MAP_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.place_dim as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.orientation_dim as u32).to_le_bytes());
        bytes.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for entry in &self.entries {
            bytes.extend_from_slice(&(entry.id as u64).to_le_bytes());
            bytes.extend_from_slice(&entry.x.to_le_bytes());
            bytes.extend_from_slice(&entry.y.to_le_bytes());
            for v in entry.place.iter().chain(&entry.orientation) {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, bytes)
            .map_err(|source| LocalizerError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<DescriptorMap, LocalizerError> {
        let bytes = std::fs::read(path)
            .map_err(|source| LocalizerError::Io { path: path.to_path_buf(), source })?;
        let corrupt = |reason: &str| LocalizerError::Corrupt {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 28 {
            return Err(corrupt("file shorter than header"));
        }
        if &bytes[..8] != MAP_MAGIC {
            return Err(LocalizerError::BadMagic { path: path.to_path_buf() });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != MAP_VERSION {
            return Err(LocalizerError::UnsupportedVersion { path: path.to_path_buf(), version });
        }
        let place_dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let orientation_dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[20..28].try_into().unwrap()) as usize;
        let entry_bytes = 8 + 16 + 8 * (place_dim + orientation_dim);
        if bytes.len() != 28 + count * entry_bytes {
            return Err(corrupt("size does not match entry count"));
        }
        let mut entries = Vec::with_capacity(count);
        let mut offset = 28;
        let f64_at = |bytes: &[u8], offset: &mut usize| -> f64 {
            let v = f64::from_le_bytes(bytes[*offset..*offset + 8].try_into().unwrap());
            *offset += 8;
            v
        };
        for _ in 0..count {
            let id = u64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap()) as usize;
            offset += 8;
            let x = f64_at(&bytes, &mut offset);
            let y = f64_at(&bytes, &mut offset);
            let place: Vec<f64> = (0..place_dim).map(|_| f64_at(&bytes, &mut offset)).collect();
            let orientation: Vec<f64> =
                (0..orientation_dim).map(|_| f64_at(&bytes, &mut offset)).collect();
            entries.push(MapEntry { id, x, y, place, orientation });
        }
        DescriptorMap::build(entries)
    }
}

/// Projects and embeds every map record: one entry per scan.
pub fn build_map(
    records: &[ScanRecord],
    net: &OreosNet,
    projection: &ProjectionConfig,
) -> Result<DescriptorMap, LocalizerError> {
    if records.is_empty() {
        return Err(LocalizerError::EmptyMap);
    }
    let mut entries = Vec::with_capacity(records.len());
    for record in records {
        let image = crate::geometry::project_scan(&record.cloud, projection)?;
        let pair = net.extract(&image)?;
        entries.push(MapEntry {
            id: record.id,
            x: record.gt_pose.x,
            y: record.gt_pose.y,
            place: pair.place,
            orientation: pair.orientation,
        });
    }
    DescriptorMap::build(entries)
}

/// The descriptor map joined with the map scans it was built from: full
/// poses and precomputed ICP targets, everything localization needs.
/// Immutable and shareable across concurrent queries.
pub struct PlaceDatabase {
    map: DescriptorMap,
    poses: Vec<PlanarPose>,
    targets: Vec<IcpTarget>,
}

impl PlaceDatabase {
    /// `records` must cover every map entry id; extra records are ignored.
    pub fn new(
        map: DescriptorMap,
        records: &[ScanRecord],
        icp: &IcpConfig,
    ) -> Result<PlaceDatabase, LocalizerError> {
        let mut poses = Vec::with_capacity(map.len());
        let mut targets = Vec::with_capacity(map.len());
        for entry in map.entries() {
            let record = records
                .iter()
                .find(|r| r.id == entry.id)
                .ok_or(LocalizerError::MissingRecord { id: entry.id })?;
            poses.push(record.gt_pose);
            targets.push(IcpTarget::new(&record.cloud, icp)?);
        }
        Ok(PlaceDatabase { map, poses, targets })
    }

    pub fn map(&self) -> &DescriptorMap {
        &self.map
    }

    pub fn pose_of(&self, id: usize) -> Option<PlanarPose> {
        self.index_of(id).map(|i| self.poses[i])
    }

    fn index_of(&self, id: usize) -> Option<usize> {
        self.map.entries().binary_search_by_key(&id, |e| e.id).ok()
    }
}

/// Wall-clock milliseconds per pipeline stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageTimings {
    pub projection_ms: f64,
    pub descriptor_ms: f64,
    pub retrieval_ms: f64,
    pub yaw_ms: f64,
    pub icp_ms: f64,
}

impl StageTimings {
    pub fn total_ms(&self) -> f64 {
        self.projection_ms + self.descriptor_ms + self.retrieval_ms + self.yaw_ms + self.icp_ms
    }
}

#[derive(Debug, Clone)]
pub struct LocalizationResult {
    /// The k retrieved candidates as `(id, descriptor distance)`, ascending.
    pub candidates: Vec<(usize, f64)>,
    /// Ground-plane position of the best candidate.
    pub candidate_position: (f64, f64),
    /// Regressed yaw discrepancy to the best candidate, radians.
    pub delta_theta: f64,
    /// Map-frame pose seeded into ICP: candidate position, candidate
    /// heading corrected by the yaw estimate.
    pub initial_pose: PlanarPose,
    /// ICP-refined map-frame pose; present only when ICP converged.
    pub refined_pose: Option<PlanarPose>,
    pub icp_converged: bool,
    pub icp_iterations: usize,
    pub icp_mean_residual: f64,
    pub timings: StageTimings,
}

impl LocalizationResult {
    /// The pose estimate the pipeline stands behind: the refinement when
    /// ICP converged, otherwise the initial guess.
    pub fn final_pose(&self) -> PlanarPose {
        self.refined_pose.unwrap_or(self.initial_pose)
    }
}

/// Runs the four-stage pipeline for one query scan against the database.
/// `k` candidates are retrieved; the best one proceeds to yaw estimation
/// and ICP.
pub fn localize(
    db: &PlaceDatabase,
    query: &PointCloud,
    net: &OreosNet,
    projection: &ProjectionConfig,
    k: usize,
    icp: &IcpConfig,
) -> Result<LocalizationResult, LocalizerError> {
    let start = Instant::now();
    let image = crate::geometry::project_scan(query, projection)?;
    let projection_ms = ms_since(start);

    let start = Instant::now();
    let pair = net.extract(&image)?;
    let descriptor_ms = ms_since(start);

    let start = Instant::now();
    let candidates = db.map.query_knn(&pair.place, k)?;
    let retrieval_ms = ms_since(start);

    let best_id = candidates[0].0;
    let best_index = db.index_of(best_id).expect("candidate id comes from the map");
    let best_entry = &db.map.entries()[best_index];
    let best_pose = db.poses[best_index];

    let start = Instant::now();
    let delta_theta = net.estimate_yaw(&pair.orientation, &best_entry.orientation)?;
    let yaw_ms = ms_since(start);

    // The estimate approximates theta_candidate - theta_query, so the
    // query expressed in the candidate frame is rotated by its negative.
    let relative_guess = PlanarPose::new(0.0, 0.0, -delta_theta);
    let initial_pose = best_pose.compose(&relative_guess);

    let start = Instant::now();
    let icp_result = icp_point_to_plane(query, &db.targets[best_index], &relative_guess, icp);
    let icp_ms = ms_since(start);

    let refined_pose = icp_result.converged.then(|| best_pose.compose(&icp_result.pose));

    Ok(LocalizationResult {
        candidates,
        candidate_position: (best_entry.x, best_entry.y),
        delta_theta,
        initial_pose,
        refined_pose,
        icp_converged: icp_result.converged,
        icp_iterations: icp_result.iterations,
        icp_mean_residual: icp_result.mean_residual,
        timings: StageTimings { projection_ms, descriptor_ms, retrieval_ms, yaw_ms, icp_ms },
    })
}

fn ms_since(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}
