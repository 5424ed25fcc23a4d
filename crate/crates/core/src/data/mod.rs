//! Dataset ingestion, synthetic generators, stratified folds and
//! leak-free standardization.

mod csv_io;
mod folds;
mod scaler;
mod synth;

pub use csv_io::load_csv;
pub use folds::{split_folds, Folds};
pub use scaler::{standardize, Scaler};
pub use synth::{make_blobs, make_moons};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV: {0}")]
    Csv(String),
    #[error("non-numeric value {value:?} at row {row}, column {column:?}")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("label column {0:?} not found in header")]
    MissingLabelColumn(String),
    #[error("duplicate column name {0:?} in header")]
    DuplicateHeader(String),
    #[error("dataset is empty")]
    Empty,
    #[error("zero-variance training features (drop or rescale them): {0:?}")]
    ZeroVariance(Vec<String>),
    #[error("class {class} has {count} members, fewer than the {folds} requested folds")]
    ClassTooSmall { class: usize, count: usize, folds: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Raw feature matrix with dense integer labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    /// `N × D`, original units.
    pub x: Tensor,
    /// Labels in `0..num_classes`.
    pub y: Vec<usize>,
    pub feature_names: Vec<String>,
    /// Original label text for each dense class index.
    pub class_labels: Vec<String>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.x.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &c in &self.y {
            counts[c] += 1;
        }
        counts
    }

    /// Standardized train/test views for one held-out fold.
    pub fn prepare_fold(&self, folds: &Folds, test_fold: usize) -> Result<FoldSplit, DataError> {
        if test_fold >= folds.k() {
            return Err(DataError::InvalidArgument(format!(
                "fold {test_fold} out of range for {} folds",
                folds.k()
            )));
        }
        let train_mask: Vec<bool> = folds.assignment().iter().map(|&f| f != test_fold).collect();
        let (scaled, scaler) = standardize(self, &train_mask)?;
        let train_idx: Vec<usize> = (0..self.len()).filter(|&i| train_mask[i]).collect();
        let test_idx: Vec<usize> = (0..self.len()).filter(|&i| !train_mask[i]).collect();
        let pick = |idx: &[usize]| Samples {
            x: scaled.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            num_classes: self.num_classes(),
        };
        Ok(FoldSplit {
            train: pick(&train_idx),
            test: pick(&test_idx),
            train_idx,
            test_idx,
            scaler,
        })
    }
}

/// Standardized features with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub num_classes: usize,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Samples {
        Samples {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Rows whose label is `class`.
    pub fn of_class(&self, class: usize) -> Samples {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.y[i] == class).collect();
        self.subset(&idx)
    }
}

#[derive(Clone, Debug)]
pub struct FoldSplit {
    pub train: Samples,
    pub test: Samples,
    /// Row indices into the source dataset.
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub scaler: Scaler,
}
