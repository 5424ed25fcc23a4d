//! Differentiable models consumed by the counterfactual objective: a
//! probabilistic classifier `p(y|x)` and a class-conditional normalizing
//! flow giving `log p(x|y)`.

mod classifier;
mod dense;
mod flow;
mod persist;
mod train;

pub use classifier::{argmax_row, train_classifier, Classifier, ClassifierKind, MLP_HIDDEN};
pub use dense::Dense;
pub use flow::{density_threshold, linear_quantile, train_flow, ConditionalFlow, FlowConfig};
pub use persist::{ModelDocument, FORMAT_VERSION};
pub use train::{TrainConfig, TrainReport, Trained};

use thiserror::Error;

use crate::ad::AdError;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training set is empty")]
    Empty,
    #[error("training set contains a single class")]
    SingleClass,
    #[error("expected {expected} features, got {got}")]
    FeatureMismatch { expected: usize, got: usize },
    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("class {0} has no training rows")]
    ClassAbsent(usize),
    #[error("feature {0} has zero variance; drop it or standardize the data before training")]
    DegenerateFeature(usize),
    #[error("unsupported model file: {0}")]
    Format(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("model file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("model file JSON: {0}")]
    Json(#[from] serde_json::Error),
}
