//! The counterfactual objective and its optimizer.
//!
//! Counterfactuals are `X′ = X₀ + diag(k) · P · D`, where `D` holds `K` base
//! shift vectors, `P` assigns instances to them and `k` scales each
//! instance's shift. Local, global and group-wise explanations are the same
//! objective with different restrictions on `(k, P, D)`.

mod constraints;
mod objective;
mod optimize;
mod refine;

pub use constraints::{apply_constraints, ConstraintError, Constraints, FeatureAction, FeatureConstraint};
pub use objective::{
    assignment_entropy, build_objective, distance_term, diversity_term, group_count_entropy, plausibility_term,
    validity_term, AssignmentSource, Objective, TermValues,
};
pub use optimize::{
    extract_groups, optimize, select_instances, CfParams, CfSolution, Group, InstanceRecord, Selection, SkipReason,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::{AdError, Tensor};
use crate::data::Scaler;
use crate::models::{Classifier, ConditionalFlow, ModelError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CfMode {
    /// One shift per instance.
    Local,
    /// One shift shared by every instance, optionally scaled per instance.
    Global { use_magnitude: bool },
    /// Up to `k_max` shifts with learned sparse assignments.
    GroupWise { k_max: usize, auto_group_count: bool },
}

impl CfMode {
    pub fn name(&self) -> &'static str {
        match self {
            CfMode::Local => "local",
            CfMode::Global { .. } => "global",
            CfMode::GroupWise { .. } => "group",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    L1,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lambda_validity: f64,
    pub lambda_plausibility: f64,
    pub lambda_assignment: f64,
    pub lambda_groups: f64,
    pub lambda_diversity: f64,
    /// Required lead of the target probability over every other class.
    pub margin: f64,
    /// Jitter added to `D Dᵀ` before the log-determinant.
    pub det_jitter: f64,
    pub distance: DistanceKind,
    pub learning_rate: f64,
    /// Second-moment decay of Adam.
    pub adam_beta2: f64,
    /// Learning rate reached at `max_iters`, as a fraction of the initial one (exponential schedule).
    pub lr_decay: f64,
    pub max_iters: usize,
    /// Stop once the loss improved by less than this over `stall_window` steps.
    pub tolerance: f64,
    pub stall_window: usize,
    /// Iterations between exact per-instance magnitude and assignment updates; 0 disables them.
    pub refine_every: usize,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda_validity: 1e5,
            lambda_plausibility: 1e4,
            lambda_assignment: 1e4,
            lambda_groups: 1e3,
            lambda_diversity: 1e2,
            margin: 0.1,
            det_jitter: 1e-6,
            distance: DistanceKind::L2,
            learning_rate: 0.05,
            adam_beta2: 0.9,
            lr_decay: 0.1,
            max_iters: 1000,
            tolerance: 1e-6,
            stall_window: 50,
            refine_every: 100,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), EngineError> {
        let weights = [
            ("lambda_validity", self.lambda_validity),
            ("lambda_plausibility", self.lambda_plausibility),
            ("lambda_assignment", self.lambda_assignment),
            ("lambda_groups", self.lambda_groups),
            ("lambda_diversity", self.lambda_diversity),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(EngineError::Config(format!(
                    "{name} must be finite and nonnegative, got {w}"
                )));
            }
        }
        if !(self.margin > 0.0 && self.margin < 1.0) {
            return Err(EngineError::Config(format!(
                "margin must lie in (0, 1), got {}",
                self.margin
            )));
        }
        if !(self.det_jitter > 0.0 && self.det_jitter.is_finite()) {
            return Err(EngineError::Config(format!(
                "det_jitter must be positive, got {}",
                self.det_jitter
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(EngineError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(EngineError::Config(format!(
                "adam_beta2 must lie in (0, 1) and lr_decay in (0, 1], got {} and {}",
                self.adam_beta2, self.lr_decay
            )));
        }
        if self.max_iters == 0 || self.stall_window == 0 || self.tolerance.is_nan() || self.tolerance < 0.0 {
            return Err(EngineError::Config(
                "max_iters and stall_window must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("optimization diverged at iteration {iteration} (last finite loss {last_finite_loss})")]
    Divergence { iteration: usize, last_finite_loss: f64 },
    #[error("no instances left to explain")]
    NoInstances,
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Everything needed to explain a batch of instances. `x0` and the bounds are in
/// the standardized space the models were trained in.
#[derive(Clone, Debug)]
pub struct CfProblem<'a> {
    pub classifier: &'a Classifier,
    pub flow: &'a ConditionalFlow,
    pub x0: Tensor,
    pub target: usize,
    pub mode: CfMode,
    pub hyper: Hyperparams,
    pub constraints: Constraints,
    /// Per-feature bounds on `X′` in standardized units.
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Plausibility threshold on `log p(x′ | target)`.
    pub delta_log: f64,
    /// Keep every magnitude at 1 in group-wise mode.
    pub freeze_magnitudes: bool,
}

impl<'a> CfProblem<'a> {
    /// Unconstrained problem with default hyperparameters.
    pub fn new(
        classifier: &'a Classifier,
        flow: &'a ConditionalFlow,
        x0: Tensor,
        target: usize,
        mode: CfMode,
        delta_log: f64,
    ) -> Self {
        let d = x0.cols();
        Self {
            classifier,
            flow,
            x0,
            target,
            mode,
            hyper: Hyperparams::default(),
            constraints: Constraints::free(d),
            lower: vec![f64::NEG_INFINITY; d],
            upper: vec![f64::INFINITY; d],
            delta_log,
            freeze_magnitudes: false,
        }
    }

    /// Installs constraints whose ranges are given in original units.
    pub fn with_constraints(mut self, constraints: Constraints, scaler: &Scaler) -> Result<Self, EngineError> {
        let (lower, upper) = constraints.standardized_bounds(scaler)?;
        self.constraints = constraints;
        self.lower = lower;
        self.upper = upper;
        Ok(self)
    }

    pub fn num_instances(&self) -> usize {
        self.x0.rows()
    }

    pub fn num_features(&self) -> usize {
        self.x0.cols()
    }

    /// Number of base shift vectors.
    pub fn num_shifts(&self) -> usize {
        match self.mode {
            CfMode::Local => self.num_instances(),
            CfMode::Global { .. } => 1,
            CfMode::GroupWise { k_max, .. } => k_max,
        }
    }

    pub fn magnitudes_free(&self) -> bool {
        match self.mode {
            CfMode::Local => false,
            CfMode::Global { use_magnitude } => use_magnitude,
            CfMode::GroupWise { .. } => !self.freeze_magnitudes,
        }
    }

    /// Weights actually applied in this mode: `(λ_s, λ_k, λ_d)`. The group
    /// regularizers are only active with more than one base vector.
    pub fn group_weights(&self) -> (f64, f64, f64) {
        match self.mode {
            CfMode::GroupWise {
                k_max,
                auto_group_count,
            } if k_max > 1 => (
                self.hyper.lambda_assignment,
                if auto_group_count {
                    self.hyper.lambda_groups
                } else {
                    0.0
                },
                self.hyper.lambda_diversity,
            ),
            _ => (0.0, 0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        self.hyper.validate()?;
        let (n, d) = (self.num_instances(), self.num_features());
        if self.x0.rank() != 2 {
            return Err(EngineError::Shape(format!("x0 has shape {:?}", self.x0.shape())));
        }
        if n == 0 {
            return Err(EngineError::NoInstances);
        }
        if self.classifier.num_features != d || self.flow.num_features != d {
            return Err(EngineError::Shape(format!(
                "x0 has {d} features, classifier {} and flow {}",
                self.classifier.num_features, self.flow.num_features
            )));
        }
        if self.target >= self.classifier.num_classes || self.target >= self.flow.num_classes {
            return Err(EngineError::Config(format!(
                "target class {} out of range",
                self.target
            )));
        }
        if self.constraints.len() != d || self.lower.len() != d || self.upper.len() != d {
            return Err(EngineError::Shape(format!(
                "constraints cover {} of {d} features",
                self.constraints.len()
            )));
        }
        if let CfMode::GroupWise { k_max, .. } = self.mode {
            if k_max == 0 || k_max > n {
                return Err(EngineError::Config(format!("k_max must lie in 1..={n}, got {k_max}")));
            }
        }
        if self.delta_log.is_nan() {
            return Err(EngineError::Config("delta_log is NaN".into()));
        }
        Ok(())
    }
}
