//! Metric global localization from single 3D LiDAR scans.
//!
//! A scan is projected onto a 2D range image and fed through a small
//! convolutional network that emits two 64-dimensional descriptors: a
//! rotation-invariant place vector used for kd-tree retrieval of nearby map
//! candidates, and a rotation-variant orientation vector from which a second
//! network regresses the yaw discrepancy to the retrieved place. The
//! candidate position and yaw estimate seed a point-to-plane ICP refinement
//! that yields the final (x, y, theta) pose.
//!
//! The crate also ships a deterministic synthetic world and ray-cast LiDAR
//! simulator for training and evaluating the pipeline at desk scale, plus
//! ingestion of odometry-format datasets (binary scans, 3x4 pose files).

pub mod autodiff;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod kdtree;
pub mod localizer;
pub mod net;
pub mod pipeline;
pub mod registration;
pub mod synthworld;
