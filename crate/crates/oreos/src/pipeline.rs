//! Command implementations behind the CLI: dataset generation, training,
//! map building, single-scan localization, and the evaluation run. Each
//! command records run metadata (config hash, seed, version) in the output
//! directory.

use crate::config::{ConfigError, RunConfig};
use crate::dataset::{
    load_dataset, load_kitti_scan, save_dataset, split_map_query, DatasetError, ScanRecord,
};
use crate::eval::{run_eval, write_report_csvs, EvalError, EvalReport};
use crate::geometry::GeometryError;
use crate::localizer::{build_map, localize, DescriptorMap, LocalizationResult, LocalizerError, PlaceDatabase};
use crate::net::{train, CheckpointError, OreosNet, TrainError};
use crate::registration::RegistrationError;
use crate::synthworld::{generate_dataset, generate_scene, SynthError, Trajectory};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Localizer(#[from] LocalizerError),
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Writes `run_metadata.txt`: which command ran, under which seed, config
/// hash and crate version. Deliberately timestamp-free so identical runs
/// produce identical bytes.
fn write_run_metadata(config: &RunConfig, command: &str) -> Result<(), PipelineError> {
    std::fs::create_dir_all(&config.out_dir).map_err(io_err(&config.out_dir))?;
    let path = config.out_dir.join("run_metadata.txt");
    let text = format!(
        "command={command}\nseed={}\nversion={}\nconfig_hash={}\n",
        config.seed,
        env!("CARGO_PKG_VERSION"),
        config.config_hash()
    );
    std::fs::write(&path, text).map_err(io_err(&path))
}

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub train_scans: usize,
    pub eval_scans: usize,
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
}

/// Builds the synthetic world and writes the training and evaluation
/// datasets. Both trajectories are two laps around the scene's corridor
/// ring; the training one is denser and phase-shifted so its poses differ
/// from the evaluation stations.
pub fn cmd_generate(config: &RunConfig) -> Result<GenerateSummary, PipelineError> {
    let scene = generate_scene(config.seed, config.world_extent, config.world_primitives)?;
    let sensor = config.sensor();
    let ring = scene.ring_radius();
    let radius = config.sampling.similar_radius;

    let eval_trajectory =
        Trajectory::two_lap_ring(ring, config.world_places, config.world_lap_offset, 0.0, radius)?;
    let train_trajectory = Trajectory::dense_ring_laps(
        ring,
        config.world_train_poses_per_lap,
        config.world_train_laps,
        config.world_train_radial_spread,
        config.world_train_jitter,
        config.world_train_phase,
        config.seed,
    )?;

    let eval_records = generate_dataset(&scene, &eval_trajectory, &sensor)?;
    let train_records = generate_dataset(&scene, &train_trajectory, &sensor)?;

    let train_dir = config.out_dir.join("train");
    let eval_dir = config.out_dir.join("eval");
    std::fs::create_dir_all(&train_dir).map_err(io_err(&train_dir))?;
    std::fs::create_dir_all(&eval_dir).map_err(io_err(&eval_dir))?;
    let train_manifest = save_dataset(&train_dir, &train_records, &config.sampling)?;
    let eval_manifest = save_dataset(&eval_dir, &eval_records, &config.sampling)?;
    write_run_metadata(config, "generate")?;

    Ok(GenerateSummary {
        train_scans: train_records.len(),
        eval_scans: eval_records.len(),
        train_manifest,
        eval_manifest,
    })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
}

/// Trains on the training dataset, writes per-epoch checkpoints, the final
/// checkpoint, and the loss log (`step L_pr L_theta L` per line).
pub fn cmd_train(config: &RunConfig) -> Result<TrainSummary, PipelineError> {
    let (records, sampling) = load_dataset(&config.train_manifest)?;
    let projection = config.projection()?;
    let network = config.network();
    let checkpoint_dir = config.out_dir.join("checkpoints");
    std::fs::create_dir_all(&checkpoint_dir).map_err(io_err(&checkpoint_dir))?;
    let output = train(
        &records,
        &projection,
        &network,
        &config.train,
        &sampling,
        Some(&checkpoint_dir),
    )?;
    output.net.save(&config.checkpoint)?;

    let loss_log = config.out_dir.join("loss_log.txt");
    let mut text = String::new();
    for loss in &output.losses {
        text.push_str(&format!(
            "{} {} {} {}\n",
            loss.step, loss.place_loss, loss.orientation_loss, loss.total
        ));
    }
    std::fs::write(&loss_log, text).map_err(io_err(&loss_log))?;
    write_run_metadata(config, "train")?;

    Ok(TrainSummary {
        steps: output.losses.len(),
        first_loss: output.losses.first().map_or(f64::NAN, |l| l.total),
        last_loss: output.losses.last().map_or(f64::NAN, |l| l.total),
        checkpoint: config.checkpoint.clone(),
        loss_log,
    })
}

#[derive(Debug, Clone)]
pub struct BuildMapSummary {
    pub entries: usize,
    pub map_file: PathBuf,
}

/// Splits the evaluation dataset, embeds the map records with the trained
/// checkpoint, and persists the descriptor map.
pub fn cmd_build_map(config: &RunConfig) -> Result<BuildMapSummary, PipelineError> {
    let (records, sampling) = load_dataset(&config.eval_manifest)?;
    let (map_ids, _) = split_map_query(&records, &sampling)?;
    let map_records: Vec<ScanRecord> =
        records.iter().filter(|r| map_ids.contains(&r.id)).cloned().collect();
    let net = OreosNet::load(&config.checkpoint)?;
    let projection = config.projection()?;
    let map = build_map(&map_records, &net, &projection)?;
    map.save(&config.map_file)?;
    write_run_metadata(config, "build-map")?;
    Ok(BuildMapSummary { entries: map.len(), map_file: config.map_file.clone() })
}

/// Localizes one scan file against the persisted map and prints nothing;
/// the caller renders the result.
pub fn cmd_localize(
    config: &RunConfig,
    scan_path: &Path,
    k: usize,
) -> Result<LocalizationResult, PipelineError> {
    let query = load_kitti_scan(scan_path)?;
    let (records, sampling) = load_dataset(&config.eval_manifest)?;
    let (map_ids, _) = split_map_query(&records, &sampling)?;
    let map_records: Vec<ScanRecord> =
        records.iter().filter(|r| map_ids.contains(&r.id)).cloned().collect();
    let map = DescriptorMap::load(&config.map_file)?;
    let net = OreosNet::load(&config.checkpoint)?;
    let projection = config.projection()?;
    let db = PlaceDatabase::new(map, &map_records, &config.icp)?;
    let result = localize(&db, &query, &net, &projection, k, &config.icp)?;
    write_run_metadata(config, "localize")?;
    Ok(result)
}

/// Runs the full evaluation sweep and writes the CSV tables plus run
/// metadata into the output directory.
pub fn cmd_eval(config: &RunConfig) -> Result<EvalReport, PipelineError> {
    let (records, sampling) = load_dataset(&config.eval_manifest)?;
    let (map_ids, query_ids) = split_map_query(&records, &sampling)?;
    let map_records: Vec<ScanRecord> =
        records.iter().filter(|r| map_ids.contains(&r.id)).cloned().collect();
    let query_records: Vec<ScanRecord> =
        records.iter().filter(|r| query_ids.contains(&r.id)).cloned().collect();
    let map = DescriptorMap::load(&config.map_file)?;
    let net = OreosNet::load(&config.checkpoint)?;
    let projection = config.projection()?;
    let db = PlaceDatabase::new(map, &map_records, &config.icp)?;
    let report = run_eval(
        &db,
        &query_records,
        &net,
        &projection,
        &config.eval,
        &config.icp,
        &config.thresholds,
    )?;
    std::fs::create_dir_all(&config.out_dir).map_err(io_err(&config.out_dir))?;
    write_report_csvs(&report, &config.out_dir)?;
    write_run_metadata(config, "eval")?;
    Ok(report)
}

/// Renders a localization result as the CLI prints it.
pub fn format_localization(result: &LocalizationResult) -> String {
    let mut out = String::new();
    out.push_str("candidates (id, descriptor distance):\n");
    for (id, dist) in &result.candidates {
        out.push_str(&format!("  {id} {dist:.6}\n"));
    }
    out.push_str(&format!(
        "candidate position: ({:.3}, {:.3})\n",
        result.candidate_position.0, result.candidate_position.1
    ));
    out.push_str(&format!(
        "yaw discrepancy estimate: {:.2} deg\n",
        result.delta_theta.to_degrees()
    ));
    let pose = result.final_pose();
    out.push_str(&format!(
        "pose estimate: x {:.3} m, y {:.3} m, theta {:.2} deg ({})\n",
        pose.x,
        pose.y,
        pose.theta().to_degrees(),
        if result.icp_converged { "icp converged" } else { "icp not converged, initial guess" }
    ));
    let t = &result.timings;
    out.push_str(&format!(
        "stage times [ms]: projection {:.2}, descriptor {:.2}, retrieval {:.2}, yaw {:.2}, icp {:.2}, total {:.2}\n",
        t.projection_ms, t.descriptor_ms, t.retrieval_ms, t.yaw_ms, t.icp_ms, t.total_ms()
    ));
    out
}

/// Renders the evaluation report summary as the CLI prints it.
pub fn format_report(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "queries: {}, shifts: {} ({}..{} deg)\n",
        report.query_count,
        report.shifts_deg.len(),
        report.shifts_deg.first().unwrap_or(&0.0),
        report.shifts_deg.last().unwrap_or(&0.0)
    ));
    out.push_str(&format!(
        "localization recall (both criteria, pooled): {:.3}\n",
        report.overall_success
    ));
    let min = report.success_per_shift.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = report.success_per_shift.iter().cloned().fold(0.0f64, f64::max);
    out.push_str(&format!("recall vs shift: min {min:.3}, max {max:.3}\n"));
    for &(k, recall, std) in &report.recall_at_k {
        out.push_str(&format!("recall@{k}: {recall:.3} (std over shifts {std:.3})\n"));
    }
    out.push_str(&format!(
        "yaw error without icp: mean {:.2} deg, std {:.2} deg, recall {:.1}%\n",
        report.yaw_stats.mean_deg, report.yaw_stats.std_deg, report.yaw_stats.recall_pct
    ));
    out.push_str(&format!(
        "post-icp success given correct candidate: {:.3}\n",
        report.post_icp_success_given_correct
    ));
    out.push_str("mean stage times [ms]: ");
    let times: Vec<String> =
        report.runtimes_ms.iter().map(|(s, ms)| format!("{s} {ms:.2}")).collect();
    out.push_str(&times.join(", "));
    out.push('\n');
    out
}

/// Convenience used by tests and the CLI alike: ensure a writer exists for
/// ad-hoc text output under the run directory.
pub fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut file = std::fs::File::create(path).map_err(io_err(path))?;
    file.write_all(text.as_bytes()).map_err(io_err(path))
}
