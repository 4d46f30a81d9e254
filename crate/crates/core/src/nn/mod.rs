//! From-scratch numeric kernel: dense tensors, CNN layers with forward and
//! backward passes, binary cross-entropy, and minibatch optimizers.
//!
//! Everything is `f64` and single-threaded; determinism matters more than
//! speed at the corpus sizes this crate targets. Layers are hand
//! differentiated (no autodiff graph), and gradient accumulation follows a
//! fixed sample-index order so results never depend on scheduling.

mod layers;
mod optim;
mod tensor;

pub use layers::{Conv2d, Dense, ForwardTape, Gradients, Layer, LayerGrads, MaxPool2d, Network};
pub use optim::{step, OptimizerConfig, OptimizerKind, OptimizerState};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

/// Probabilities are clamped to [EPS, 1-EPS] before taking logs.
pub const BCE_EPS: f64 = 1e-7;

/// Elementwise rectifier, max(0, x).
pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Logistic sigmoid, 1 / (1 + e^{-x}).
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Binary cross-entropy of predicted probability `p` against label `y` in {0, 1}.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}
