use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{AdError, Tensor, Var};
use crate::data::Scaler;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureAction {
    #[default]
    Free,
    Frozen,
    IncreaseOnly,
    DecreaseOnly,
}

impl FromStr for FeatureAction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "free" => Ok(Self::Free),
            "frozen" | "fixed" => Ok(Self::Frozen),
            "increase_only" | "increase" => Ok(Self::IncreaseOnly),
            "decrease_only" | "decrease" => Ok(Self::DecreaseOnly),
            other => Err(format!("unknown action {other:?}")),
        }
    }
}

/// Action and allowed range of one feature, in original units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureConstraint {
    pub action: FeatureAction,
    pub lo: f64,
    pub hi: f64,
}

impl Default for FeatureConstraint {
    fn default() -> Self {
        Self {
            action: FeatureAction::Free,
            lo: f64::NEG_INFINITY,
            hi: f64::INFINITY,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConstraintError {
    #[error("constraint file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("constraint line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("constraint for unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("feature {feature:?} has an empty range [{lo}, {hi}]")]
    EmptyRange { feature: String, lo: f64, hi: f64 },
    #[error("{got} constraints for {expected} features")]
    Length { expected: usize, got: usize },
}

/// Per-feature actionability constraints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    features: Vec<FeatureConstraint>,
}

impl Constraints {
    pub fn free(num_features: usize) -> Self {
        Self {
            features: vec![FeatureConstraint::default(); num_features],
        }
    }

    pub fn new(features: Vec<FeatureConstraint>) -> Result<Self, ConstraintError> {
        for (j, f) in features.iter().enumerate() {
            if f.lo.is_nan() || f.hi.is_nan() || f.lo > f.hi {
                return Err(ConstraintError::EmptyRange {
                    feature: format!("#{j}"),
                    lo: f.lo,
                    hi: f.hi,
                });
            }
        }
        Ok(Self { features })
    }

    /// Parses lines of `name, action, lo, hi`. Bounds may be blank or `±inf`;
    /// features without a line stay free and unbounded. `#` starts a comment.
    pub fn parse(text: &str, feature_names: &[String]) -> Result<Self, ConstraintError> {
        let mut features = vec![FeatureConstraint::default(); feature_names.len()];
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        for record in reader.records() {
            let record = record.map_err(|e| ConstraintError::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                message: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line() as usize);
            if record.iter().all(str::is_empty) {
                continue;
            }
            let parse_err = |message: String| ConstraintError::Parse { line, message };
            if !(2..=4).contains(&record.len()) {
                return Err(parse_err(format!(
                    "expected `name, action, lo, hi`, got {} fields",
                    record.len()
                )));
            }
            let name = &record[0];
            let j = feature_names
                .iter()
                .position(|f| f == name)
                .ok_or_else(|| ConstraintError::UnknownFeature(name.to_string()))?;
            let action = record[1].parse::<FeatureAction>().map_err(parse_err)?;
            let bound = |idx: usize, default: f64| -> Result<f64, ConstraintError> {
                match record.get(idx) {
                    None | Some("") => Ok(default),
                    Some(s) => s
                        .parse::<f64>()
                        .map_err(|_| parse_err(format!("bound {s:?} is not a number"))),
                }
            };
            let lo = bound(2, f64::NEG_INFINITY)?;
            let hi = bound(3, f64::INFINITY)?;
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(ConstraintError::EmptyRange {
                    feature: name.to_string(),
                    lo,
                    hi,
                });
            }
            features[j] = FeatureConstraint { action, lo, hi };
        }
        Ok(Self { features })
    }

    pub fn load(path: &Path, feature_names: &[String]) -> Result<Self, ConstraintError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConstraintError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, feature_names)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn features(&self) -> &[FeatureConstraint] {
        &self.features
    }

    pub fn action(&self, j: usize) -> FeatureAction {
        self.features[j].action
    }

    /// Ranges mapped through the scaler.
    pub fn standardized_bounds(&self, scaler: &Scaler) -> Result<(Vec<f64>, Vec<f64>), ConstraintError> {
        if scaler.mean.len() != self.features.len() {
            return Err(ConstraintError::Length {
                expected: scaler.mean.len(),
                got: self.features.len(),
            });
        }
        Ok(self
            .features
            .iter()
            .enumerate()
            .map(|(j, f)| (scaler.to_standard(j, f.lo), scaler.to_standard(j, f.hi)))
            .unzip())
    }

    fn mask(&self, action: FeatureAction) -> Vec<f64> {
        self.features
            .iter()
            .map(|f| if f.action == action { 1.0 } else { 0.0 })
            .collect()
    }

    pub(crate) fn has_monotone(&self) -> bool {
        self.features
            .iter()
            .any(|f| matches!(f.action, FeatureAction::IncreaseOnly | FeatureAction::DecreaseOnly))
    }
}

/// Maps unconstrained parameters `u` (`K × D`) to shift vectors: frozen
/// columns are zero, monotone columns are `±softplus(u)`, free columns are `u`.
pub fn apply_constraints<'t>(u: Var<'t>, constraints: &Constraints) -> Result<Var<'t>, AdError> {
    let tape = u.tape();
    if u.shape().last() != Some(&constraints.len()) {
        return Err(AdError::Shape(format!(
            "{} constraints for shifts of shape {:?}",
            constraints.len(),
            u.shape()
        )));
    }
    let free = tape.constant(Tensor::vector(constraints.mask(FeatureAction::Free))?);
    let mut d = u.mul(&free)?;
    if constraints.has_monotone() {
        let sign: Vec<f64> = constraints
            .features
            .iter()
            .map(|f| match f.action {
                FeatureAction::IncreaseOnly => 1.0,
                FeatureAction::DecreaseOnly => -1.0,
                _ => 0.0,
            })
            .collect();
        let sign = tape.constant(Tensor::vector(sign)?);
        d = d.add(&u.softplus()?.mul(&sign)?)?;
    }
    Ok(d)
}
