//! Minimal dense-tensor engine with reverse-mode differentiation: the layer
//! set needed by the descriptor network, a sequential container, and ADAM.

mod adam;
mod layers;
mod sequential;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use layers::{backward, forward, LayerSpec, LayerTrace};
pub use sequential::{ForwardTrace, GradientSet, Sequential};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch { context: String, expected: String, actual: String },
    #[error("invalid layer spec: {0}")]
    InvalidLayer(String),
    #[error("backward called without a matching forward pass")]
    BackwardWithoutForward,
    #[error("non-finite gradient for parameter {index} of layer {layer}")]
    NonFiniteGradient { layer: usize, index: usize },
}
