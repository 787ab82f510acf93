//! Joint training of the descriptor trunk and yaw head.
//!
//! Each batch draws triplets, gives every scan a fresh random yaw rotation
//! (the augmentation that teaches `v` invariance and gives the yaw head its
//! full target range), projects the rotated clouds, and minimizes
//! `L = L_pr + L_theta` with ADAM. Dissimilar samples come from anywhere
//! beyond the similar radius in the first mining stage and from the nearby
//! hard-negative band after the stage switch. The run is single threaded
//! and bit-reproducible per seed.

use super::{
    image_to_tensor, orientation_loss_grads, triplet_loss_grads, triplet_loss_literal_grads,
    NetworkConfig, OreosNet,
};
use crate::autodiff::{AdamConfig, AdamState, GradientSet, NetError, Tensor};
use crate::dataset::{sample_triplets, DatasetError, MiningStage, SamplingConfig, ScanRecord};
use crate::geometry::{
    normalize_angle, project_scan, rotate_yaw, GeometryError, ProjectionConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Checkpoint(#[from] super::CheckpointError),
    #[error("training diverged at step {step}: non-finite loss")]
    Diverged { step: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Triplet margin `m`.
    pub margin: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Triplets drawn per epoch; batches are consecutive chunks.
    pub triplets_per_epoch: usize,
    /// First epoch that samples hard negatives instead of random ones.
    pub stage_switch_epoch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Train with the un-hinged, twice-squared loss exactly as printed in
    /// its source formulation instead of the standard hinged form.
    pub literal_triplet_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: 0.5,
            epochs: 40,
            batch_size: 16,
            triplets_per_epoch: 256,
            stage_switch_epoch: 20,
            learning_rate: 0.001,
            seed: 0,
            literal_triplet_loss: false,
        }
    }
}

/// Mean losses of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLoss {
    pub step: usize,
    pub place_loss: f64,
    pub orientation_loss: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct TrainOutput {
    pub net: OreosNet,
    pub losses: Vec<BatchLoss>,
}

/// Yaw target between two scans rotated by `rot_anchor` and `rot_similar`:
/// rotating a cloud by `delta` lowers its effective heading by `delta`, so
/// the discrepancy `theta_similar - theta_anchor` gains `rot_anchor` and
/// loses `rot_similar`.
pub fn augmented_yaw_target(delta_theta_gt: f64, rot_anchor: f64, rot_similar: f64) -> f64 {
    normalize_angle(delta_theta_gt + rot_anchor - rot_similar)
}

pub fn train(
    records: &[ScanRecord],
    projection: &ProjectionConfig,
    network: &NetworkConfig,
    config: &TrainConfig,
    sampling: &SamplingConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutput, TrainError> {
    let mut net = OreosNet::new(network, config.seed)?;
    if (network.input_height, network.input_width) != (projection.height, projection.width) {
        return Err(NetError::ShapeMismatch {
            context: "training projection".into(),
            expected: format!("{}x{}", network.input_height, network.input_width),
            actual: format!("{}x{}", projection.height, projection.width),
        }
        .into());
    }
    let adam = AdamConfig { alpha: config.learning_rate, ..AdamConfig::default() };
    let mut trunk_state = AdamState::new(net.trunk.params());
    let mut yaw_state = AdamState::new(net.yaw_head.params());
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed_0001));
    let mut losses = Vec::new();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let stage = if epoch < config.stage_switch_epoch {
            MiningStage::Random
        } else {
            MiningStage::HardNegative
        };
        let epoch_seed = config
            .seed
            .wrapping_add((epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let triplets =
            sample_triplets(records, sampling, stage, config.triplets_per_epoch, epoch_seed)?;

        for batch in triplets.chunks(config.batch_size.max(1)) {
            let mut trunk_grads = GradientSet::zeros_like(net.trunk.params());
            let mut yaw_grads = GradientSet::zeros_like(net.yaw_head.params());
            let mut sum_place = 0.0;
            let mut sum_orientation = 0.0;

            for triplet in batch {
                let rot_a = aug_rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let rot_s = aug_rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let rot_d = aug_rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let target = augmented_yaw_target(triplet.delta_theta_gt, rot_a, rot_s);

                let project = |record: &ScanRecord, rot: f64| -> Result<Tensor, TrainError> {
                    let cloud = rotate_yaw(&record.cloud, rot);
                    Ok(image_to_tensor(&project_scan(&cloud, projection)?))
                };
                let input_a = project(&records[triplet.anchor], rot_a)?;
                let input_s = project(&records[triplet.similar], rot_s)?;
                let input_d = project(&records[triplet.dissimilar], rot_d)?;

                let (out_a, trace_a) = net.trunk.forward_traced(&input_a)?;
                let (out_s, trace_s) = net.trunk.forward_traced(&input_s)?;
                let (out_d, trace_d) = net.trunk.forward_traced(&input_d)?;
                let split = net.place_dim;

                let (l_pr, g_va, g_vs, g_vd) = if config.literal_triplet_loss {
                    triplet_loss_literal_grads(
                        &out_a.data()[..split],
                        &out_s.data()[..split],
                        &out_d.data()[..split],
                        config.margin,
                    )
                } else {
                    triplet_loss_grads(
                        &out_a.data()[..split],
                        &out_s.data()[..split],
                        &out_d.data()[..split],
                        config.margin,
                    )
                };

                let mut yaw_input = Vec::with_capacity(2 * net.orientation_dim);
                yaw_input.extend_from_slice(&out_a.data()[split..]);
                yaw_input.extend_from_slice(&out_s.data()[split..]);
                let (y, yaw_trace) = net.yaw_head.forward_traced(&Tensor::from_vec(yaw_input))?;
                let (l_th, g_y) =
                    orientation_loss_grads([y.data()[0], y.data()[1]], target);

                let (yaw_param_grads, g_yaw_input) =
                    net.yaw_head.backward(&yaw_trace, &Tensor::from_vec(g_y.to_vec()))?;
                yaw_grads.accumulate(&yaw_param_grads);

                let w_dim = net.orientation_dim;
                let mut grad_a = g_va;
                grad_a.extend_from_slice(&g_yaw_input.data()[..w_dim]);
                let mut grad_s = g_vs;
                grad_s.extend_from_slice(&g_yaw_input.data()[w_dim..]);
                let mut grad_d = g_vd;
                grad_d.extend_from_slice(&vec![0.0; w_dim]);

                for (trace, grad) in
                    [(&trace_a, grad_a), (&trace_s, grad_s), (&trace_d, grad_d)]
                {
                    let (param_grads, _) =
                        net.trunk.backward(trace, &Tensor::from_vec(grad))?;
                    trunk_grads.accumulate(&param_grads);
                }

                sum_place += l_pr;
                sum_orientation += l_th;
            }

            let scale = 1.0 / batch.len() as f64;
            trunk_grads.scale(scale);
            yaw_grads.scale(scale);
            let place_loss = sum_place * scale;
            let orientation_loss = sum_orientation * scale;
            let total = place_loss + orientation_loss;
            if !total.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            trunk_state.step(&adam, net.trunk.params_mut(), &trunk_grads)?;
            yaw_state.step(&adam, net.yaw_head.params_mut(), &yaw_grads)?;
            losses.push(BatchLoss { step, place_loss, orientation_loss, total });
            step += 1;
        }

        if let Some(dir) = checkpoint_dir {
            net.save(&dir.join(format!("checkpoint_epoch_{epoch:03}.bin")))?;
        }
    }
    Ok(TrainOutput { net, losses })
}
