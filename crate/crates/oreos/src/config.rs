//! Run configuration: one plain-text `key=value` file, overridable
//! key-by-key, hashed canonically for run metadata.
//!
//! Unknown keys are rejected so typos surface instead of silently keeping a
//! default. Relative paths are interpreted against the working directory.

use crate::dataset::SamplingConfig;
use crate::eval::{EvalParams, SuccessThresholds};
use crate::geometry::{GeometryError, ProjectionConfig};
use crate::net::{NetworkConfig, TrainConfig};
use crate::registration::IcpConfig;
use crate::synthworld::SensorConfig;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config line {line}: expected key=value, got {text:?}")]
    Malformed { line: usize, text: String },
    #[error("config key {key}: cannot parse {value:?}: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("unknown config key {key}")]
    UnknownKey { key: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Everything a pipeline run needs, resolved to concrete values.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub map_file: PathBuf,
    pub projection_height: usize,
    pub projection_width: usize,
    pub zenith_min_deg: f64,
    pub zenith_max_deg: f64,
    pub max_range: f64,
    pub world_extent: f64,
    pub world_primitives: usize,
    /// Poses per lap of the evaluation trajectory (map places).
    pub world_places: usize,
    /// Poses per lap of the denser training trajectory.
    pub world_train_poses_per_lap: usize,
    /// Laps of the training trajectory.
    pub world_train_laps: usize,
    /// Radial band covered by the training laps, meters.
    pub world_train_radial_spread: f64,
    /// Per-pose radial jitter of the training trajectory, meters.
    pub world_train_jitter: f64,
    /// Radial offset between the two evaluation laps, meters.
    pub world_lap_offset: f64,
    /// Angular offset of the training stations, radians.
    pub world_train_phase: f64,
    pub sensor_beams_azimuth: usize,
    pub sensor_beams_zenith: usize,
    pub sensor_height: f64,
    pub sensor_range_jitter: f64,
    pub net_conv_channels: [usize; 3],
    pub net_fc_units: usize,
    pub net_yaw_hidden: usize,
    pub net_input_pool: (usize, usize),
    pub train: TrainConfig,
    pub sampling: SamplingConfig,
    pub icp: IcpConfig,
    pub eval: EvalParams,
    pub thresholds: SuccessThresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        let out = PathBuf::from("out");
        RunConfig {
            seed: 7,
            out_dir: out.clone(),
            train_manifest: out.join("train/manifest.txt"),
            eval_manifest: out.join("eval/manifest.txt"),
            checkpoint: out.join("checkpoint.bin"),
            map_file: out.join("map.bin"),
            projection_height: 16,
            projection_width: 360,
            zenith_min_deg: -25.0,
            zenith_max_deg: 5.0,
            max_range: 80.0,
            world_extent: 48.0,
            world_primitives: 60,
            world_places: 50,
            world_train_poses_per_lap: 150,
            world_train_laps: 4,
            world_train_radial_spread: 0.8,
            world_train_jitter: 0.15,
            world_lap_offset: 0.25,
            world_train_phase: 0.03,
            sensor_beams_azimuth: 360,
            sensor_beams_zenith: 16,
            sensor_height: 1.5,
            sensor_range_jitter: 0.0,
            net_conv_channels: [16, 32, 64],
            net_fc_units: 256,
            net_yaw_hidden: 64,
            net_input_pool: (4, 1),
            train: TrainConfig { seed: 7, ..TrainConfig::default() },
            sampling: SamplingConfig::default(),
            icp: IcpConfig::default(),
            eval: EvalParams::default(),
            thresholds: SuccessThresholds::default(),
        }
    }
}

impl RunConfig {
    /// Loads a config file (optional) and applies `key=value` overrides on
    /// top, in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let mut pairs: Vec<(String, String, usize)> = Vec::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
            for (idx, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or(ConfigError::Malformed {
                    line: idx + 1,
                    text: line.to_string(),
                })?;
                pairs.push((key.trim().to_string(), value.trim().to_string(), idx + 1));
            }
        }
        for (idx, item) in overrides.iter().enumerate() {
            let (key, value) = item.split_once('=').ok_or(ConfigError::Malformed {
                line: idx + 1,
                text: item.clone(),
            })?;
            pairs.push((key.trim().to_string(), value.trim().to_string(), 0));
        }

        let mut config = RunConfig::default();
        // Paths not set explicitly follow out_dir; apply out_dir first.
        let mut explicit: BTreeMap<&str, String> = BTreeMap::new();
        for (key, value, _) in &pairs {
            explicit.insert(key.as_str(), value.clone());
        }
        if let Some(out) = explicit.get("out_dir") {
            config.out_dir = PathBuf::from(out);
            config.train_manifest = config.out_dir.join("train/manifest.txt");
            config.eval_manifest = config.out_dir.join("eval/manifest.txt");
            config.checkpoint = config.out_dir.join("checkpoint.bin");
            config.map_file = config.out_dir.join("map.bin");
        }
        for (key, value, _) in &pairs {
            config.apply(key, value)?;
        }
        Ok(config)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e: T::Err| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                reason: e.to_string(),
            })
        }
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                self.train.seed = self.seed;
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "dataset.train" => self.train_manifest = PathBuf::from(value),
            "dataset.eval" => self.eval_manifest = PathBuf::from(value),
            "checkpoint" => self.checkpoint = PathBuf::from(value),
            "map_file" => self.map_file = PathBuf::from(value),
            "projection.height" => self.projection_height = parse(key, value)?,
            "projection.width" => self.projection_width = parse(key, value)?,
            "projection.zenith_min_deg" => self.zenith_min_deg = parse(key, value)?,
            "projection.zenith_max_deg" => self.zenith_max_deg = parse(key, value)?,
            "projection.max_range" => self.max_range = parse(key, value)?,
            "world.extent" => self.world_extent = parse(key, value)?,
            "world.primitives" => self.world_primitives = parse(key, value)?,
            "world.places" => self.world_places = parse(key, value)?,
            "world.train_poses_per_lap" => self.world_train_poses_per_lap = parse(key, value)?,
            "world.train_laps" => self.world_train_laps = parse(key, value)?,
            "world.train_radial_spread" => self.world_train_radial_spread = parse(key, value)?,
            "world.train_jitter" => self.world_train_jitter = parse(key, value)?,
            "world.lap_offset" => self.world_lap_offset = parse(key, value)?,
            "world.train_phase" => self.world_train_phase = parse(key, value)?,
            "sensor.beams_azimuth" => self.sensor_beams_azimuth = parse(key, value)?,
            "sensor.beams_zenith" => self.sensor_beams_zenith = parse(key, value)?,
            "sensor.height" => self.sensor_height = parse(key, value)?,
            "sensor.range_jitter" => self.sensor_range_jitter = parse(key, value)?,
            "net.conv_channels" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(ConfigError::BadValue {
                        key: key.to_string(),
                        value: value.to_string(),
                        reason: "expected three comma-separated counts".into(),
                    });
                }
                for (slot, part) in self.net_conv_channels.iter_mut().zip(parts) {
                    *slot = parse(key, part)?;
                }
            }
            "net.fc_units" => self.net_fc_units = parse(key, value)?,
            "net.yaw_hidden" => self.net_yaw_hidden = parse(key, value)?,
            "net.input_pool_h" => self.net_input_pool.0 = parse(key, value)?,
            "net.input_pool_w" => self.net_input_pool.1 = parse(key, value)?,
            "train.margin" => self.train.margin = parse(key, value)?,
            "train.epochs" => self.train.epochs = parse(key, value)?,
            "train.batch_size" => self.train.batch_size = parse(key, value)?,
            "train.triplets_per_epoch" => self.train.triplets_per_epoch = parse(key, value)?,
            "train.stage_switch_epoch" => self.train.stage_switch_epoch = parse(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse(key, value)?,
            "train.literal_triplet_loss" => self.train.literal_triplet_loss = parse(key, value)?,
            "sampling.similar_radius" => self.sampling.similar_radius = parse(key, value)?,
            "sampling.stage2_min" => self.sampling.stage2_band.0 = parse(key, value)?,
            "sampling.stage2_max" => self.sampling.stage2_band.1 = parse(key, value)?,
            "sampling.query_spacing" => self.sampling.query_spacing = parse(key, value)?,
            "icp.max_iterations" => self.icp.max_iterations = parse(key, value)?,
            "icp.max_correspondence" => self.icp.max_correspondence_dist = parse(key, value)?,
            "icp.translation_epsilon" => self.icp.translation_epsilon = parse(key, value)?,
            "icp.rotation_epsilon" => self.icp.rotation_epsilon = parse(key, value)?,
            "icp.normal_neighbors" => self.icp.normal_neighbors = parse(key, value)?,
            "eval.k_max" => self.eval.k_max = parse(key, value)?,
            "eval.yaw_step_deg" => self.eval.yaw_step_deg = parse(key, value)?,
            "eval.place_radius" => self.thresholds.place_radius_m = parse(key, value)?,
            "eval.yaw_tolerance_deg" => self.thresholds.yaw_tolerance_deg = parse(key, value)?,
            _ => return Err(ConfigError::UnknownKey { key: key.to_string() }),
        }
        Ok(())
    }

    pub fn projection(&self) -> Result<ProjectionConfig, ConfigError> {
        Ok(ProjectionConfig::new(
            self.projection_height,
            self.projection_width,
            self.zenith_min_deg.to_radians(),
            self.zenith_max_deg.to_radians(),
            self.max_range,
        )?)
    }

    pub fn sensor(&self) -> SensorConfig {
        SensorConfig {
            beams_azimuth: self.sensor_beams_azimuth,
            beams_zenith: self.sensor_beams_zenith,
            zenith_min: self.zenith_min_deg.to_radians(),
            zenith_max: self.zenith_max_deg.to_radians(),
            max_range: self.max_range,
            height: self.sensor_height,
            range_jitter_std: self.sensor_range_jitter,
        }
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            conv_channels: self.net_conv_channels,
            fc_units: self.net_fc_units,
            yaw_hidden: self.net_yaw_hidden,
            input_pool: self.net_input_pool,
            ..NetworkConfig::for_input(self.projection_height, self.projection_width)
        }
    }

    /// Canonical dump: every effective value as sorted `key=value` lines.
    /// Two configs hash equal exactly when every effective value matches.
    pub fn canonical_dump(&self) -> String {
        let mut lines = vec![
            format!("checkpoint={}", self.checkpoint.display()),
            format!("dataset.eval={}", self.eval_manifest.display()),
            format!("dataset.train={}", self.train_manifest.display()),
            format!("eval.k_max={}", self.eval.k_max),
            format!("eval.place_radius={}", self.thresholds.place_radius_m),
            format!("eval.yaw_step_deg={}", self.eval.yaw_step_deg),
            format!("eval.yaw_tolerance_deg={}", self.thresholds.yaw_tolerance_deg),
            format!("icp.max_correspondence={}", self.icp.max_correspondence_dist),
            format!("icp.max_iterations={}", self.icp.max_iterations),
            format!("icp.normal_neighbors={}", self.icp.normal_neighbors),
            format!("icp.rotation_epsilon={}", self.icp.rotation_epsilon),
            format!("icp.translation_epsilon={}", self.icp.translation_epsilon),
            format!("map_file={}", self.map_file.display()),
            format!(
                "net.conv_channels={},{},{}",
                self.net_conv_channels[0], self.net_conv_channels[1], self.net_conv_channels[2]
            ),
            format!("net.fc_units={}", self.net_fc_units),
            format!("net.input_pool_h={}", self.net_input_pool.0),
            format!("net.input_pool_w={}", self.net_input_pool.1),
            format!("net.yaw_hidden={}", self.net_yaw_hidden),
            format!("out_dir={}", self.out_dir.display()),
            format!("projection.height={}", self.projection_height),
            format!("projection.max_range={}", self.max_range),
            format!("projection.width={}", self.projection_width),
            format!("projection.zenith_max_deg={}", self.zenith_max_deg),
            format!("projection.zenith_min_deg={}", self.zenith_min_deg),
            format!("sampling.query_spacing={}", self.sampling.query_spacing),
            format!("sampling.similar_radius={}", self.sampling.similar_radius),
            format!("sampling.stage2_max={}", self.sampling.stage2_band.1),
            format!("sampling.stage2_min={}", self.sampling.stage2_band.0),
            format!("seed={}", self.seed),
            format!("sensor.beams_azimuth={}", self.sensor_beams_azimuth),
            format!("sensor.beams_zenith={}", self.sensor_beams_zenith),
            format!("sensor.height={}", self.sensor_height),
            format!("sensor.range_jitter={}", self.sensor_range_jitter),
            format!("train.batch_size={}", self.train.batch_size),
            format!("train.epochs={}", self.train.epochs),
            format!("train.learning_rate={}", self.train.learning_rate),
            format!("train.literal_triplet_loss={}", self.train.literal_triplet_loss),
            format!("train.margin={}", self.train.margin),
            format!("train.stage_switch_epoch={}", self.train.stage_switch_epoch),
            format!("train.triplets_per_epoch={}", self.train.triplets_per_epoch),
            format!("world.extent={}", self.world_extent),
            format!("world.lap_offset={}", self.world_lap_offset),
            format!("world.places={}", self.world_places),
            format!("world.primitives={}", self.world_primitives),
            format!("world.train_phase={}", self.world_train_phase),
            format!("world.train_poses_per_lap={}", self.world_train_poses_per_lap),
            format!("world.train_laps={}", self.world_train_laps),
            format!("world.train_radial_spread={}", self.world_train_radial_spread),
            format!("world.train_jitter={}", self.world_train_jitter),
        ];
        lines.sort();
        lines.join("\n") + "\n"
    }

    pub fn config_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_dump().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn defaults_round_trip_through_dump() {
        let config = RunConfig::default();
        let dump = config.canonical_dump();
        let dir = tempdir().unwrap();
        let path = dir.path().join("config.txt");
        std::fs::write(&path, &dump).unwrap();
        let loaded = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(config, loaded);
        assert_eq!(config.config_hash(), loaded.config_hash());
    }

    #[test]
    fn overrides_apply_in_order() {
        let config = RunConfig::load(
            None,
            &["seed=99".into(), "train.epochs=3".into(), "train.epochs=5".into()],
        )
        .unwrap();
        assert_eq!(config.seed, 99);
        assert_eq!(config.train.seed, 99);
        assert_eq!(config.train.epochs, 5);
    }

    #[test]
    fn out_dir_override_moves_default_paths() {
        let config = RunConfig::load(None, &["out_dir=runs/x".into()]).unwrap();
        assert_eq!(config.checkpoint, PathBuf::from("runs/x/checkpoint.bin"));
        assert_eq!(config.map_file, PathBuf::from("runs/x/map.bin"));
        // Explicit paths win over the derived ones.
        let config =
            RunConfig::load(None, &["out_dir=runs/x".into(), "checkpoint=c.bin".into()]).unwrap();
        assert_eq!(config.checkpoint, PathBuf::from("c.bin"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::load(None, &["projektion.width=9".into()]).unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { .. }));
    }

    #[test]
    fn comments_and_blanks_are_skipped() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("config.txt");
        std::fs::write(&path, "# comment\n\nseed=11\n").unwrap();
        let config = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(config.seed, 11);
    }
}
