//! Attention-based multiple-instance learning.
//!
//! A bag of instance feature vectors is embedded, pooled through per-class
//! softmax attention into a bag representation, and classified — all
//! parameters trained end-to-end with gradient descent from bag-level labels
//! only. Instance dropout randomly replaces instances with a neutral vector
//! during training so attention spreads over all informative instances.
//! Analytic gradients are verified against central finite differences.

mod grad;
mod model;
mod train;

pub use grad::{gradcheck, gradcheck_compare, GradcheckDims, GradcheckReport, Gradients};
pub use model::{
    aggregate_baseline, forward_traced, load_checkpoint, save_checkpoint, Affine, AttentionMode,
    AttentionResult, ForwardTrace, MilDims, MilModel, Mode, Pooling, PoolingModel, Scaler,
};
pub use train::{
    class_weights, instance_dropout, train, EpochLog, PlateauSchedule, TrainConfig, TrainOutcome,
};

use crate::tiler::TileRef;

#[derive(Debug, thiserror::Error)]
pub enum MilError {
    #[error("input error: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
}

/// One slide as a bag of instances. `truth` carries per-instance lesion
/// labels on synthetic data, used only at evaluation time.
#[derive(Debug, Clone)]
pub struct Bag {
    pub slide_id: String,
    pub instances: Vec<Vec<f64>>,
    pub tiles: Vec<TileRef>,
    pub label: usize,
    pub truth: Option<Vec<bool>>,
}

impl Bag {
    pub fn k(&self) -> usize {
        self.instances.len()
    }
}

/// Cross-entropy of the bag prediction, weighted by the label's class weight:
/// `-w[label] * ln(probs[label])`. Probabilities are clamped at 1e-12; the
/// returned flag reports whether the clamp engaged.
pub fn loss(result: &AttentionResult, label: usize, class_weights: &[f64]) -> (f64, bool) {
    let p = result.probs[label];
    let clamped = p < 1e-12;
    let p = p.max(1e-12);
    (-class_weights[label] * p.ln(), clamped)
}
