use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dense::{self, Dense};
use super::train::{fit, Trainable, Trained};
use super::{ModelError, TrainConfig};
use crate::ad::{AdError, Tape, Tensor, Var};
use crate::data::Samples;

/// Width of both hidden layers of the MLP classifier.
pub const MLP_HIDDEN: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    LogisticRegression,
    Mlp,
}

impl std::str::FromStr for ClassifierKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lr" | "logistic-regression" => Ok(Self::LogisticRegression),
            "mlp" => Ok(Self::Mlp),
            other => Err(format!("unknown classifier kind {other:?} (expected lr or mlp)")),
        }
    }
}

/// Softmax classifier: multinomial logistic regression, or a two-hidden-layer ReLU MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub kind: ClassifierKind,
    pub num_features: usize,
    pub num_classes: usize,
    pub layers: Vec<Dense>,
}

impl Classifier {
    /// He-initialized network (logistic regression starts at zero).
    pub fn init(kind: ClassifierKind, num_features: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = match kind {
            ClassifierKind::LogisticRegression => vec![Dense::zeros(num_features, num_classes)],
            ClassifierKind::Mlp => {
                let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
                vec![
                    Dense::random(num_features, MLP_HIDDEN, he(num_features), &mut rng),
                    Dense::random(MLP_HIDDEN, MLP_HIDDEN, he(MLP_HIDDEN), &mut rng),
                    Dense::random(MLP_HIDDEN, num_classes, (1.0 / MLP_HIDDEN as f64).sqrt(), &mut rng),
                ]
            }
        };
        Self {
            kind,
            num_features,
            num_classes,
            layers,
        }
    }

    /// Logistic regression with all-zero weights; predicts the uniform distribution.
    pub fn logistic_zeros(num_features: usize, num_classes: usize) -> Self {
        Self::init(ClassifierKind::LogisticRegression, num_features, num_classes, 0)
    }

    fn check_features(&self, cols: usize) -> Result<(), ModelError> {
        if cols != self.num_features {
            return Err(ModelError::FeatureMismatch {
                expected: self.num_features,
                got: cols,
            });
        }
        Ok(())
    }

    /// Logits for `x` with the model weights recorded as constants.
    pub fn logits_var<'t>(&self, x: Var<'t>) -> Result<Var<'t>, ModelError> {
        self.check_features(x.shape().last().copied().unwrap_or(0))?;
        let params = dense::bind(x.tape(), &self.layers, false);
        Ok(dense::mlp(x, &params)?)
    }

    /// Row-stochastic class probabilities, differentiable with respect to `x`.
    pub fn predict_proba_var<'t>(&self, x: Var<'t>) -> Result<Var<'t>, ModelError> {
        Ok(self.logits_var(x)?.softmax()?)
    }

    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let tape = Tape::new();
        Ok(self.predict_proba_var(tape.constant(x.clone()))?.value())
    }

    /// Arg-max class per row (lowest index on ties).
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>, ModelError> {
        let p = self.predict_proba(x)?;
        Ok((0..p.rows()).map(|i| argmax_row(p.row(i))).collect())
    }

    pub fn accuracy(&self, data: &Samples) -> Result<f64, ModelError> {
        if data.is_empty() {
            return Err(ModelError::Empty);
        }
        let pred = self.predict(&data.x)?;
        let hits = pred.iter().zip(&data.y).filter(|(a, b)| a == b).count();
        Ok(hits as f64 / data.len() as f64)
    }
}

/// Index of the largest entry (lowest index on ties).
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

impl Trainable for Classifier {
    fn params(&self) -> Vec<&Tensor> {
        dense::tensors(&self.layers)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        dense::tensors_mut(&mut self.layers)
    }

    /// Mean cross-entropy.
    fn batch_loss<'t>(&self, tape: &'t Tape, params: &[Var<'t>], x: &Tensor, y: &[usize]) -> Result<Var<'t>, AdError> {
        let logits = dense::mlp(tape.constant(x.clone()), params)?;
        let onehot = tape.constant(one_hot(y, self.num_classes));
        logits.log_softmax()?.mul(&onehot)?.sum(Some(1))?.mean(None)?.neg()
    }
}

pub(crate) fn one_hot(y: &[usize], num_classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[y.len(), num_classes]);
    let data: Vec<f64> = y
        .iter()
        .flat_map(|&c| (0..num_classes).map(move |j| if j == c { 1.0 } else { 0.0 }))
        .collect();
    t.set_data(&data);
    t
}

/// Trains with mini-batch Adam on the cross-entropy loss. The report's scores
/// are accuracies on the fitting rows and on the early-stopping holdout.
pub fn train_classifier(
    data: &Samples,
    kind: ClassifierKind,
    cfg: &TrainConfig,
) -> Result<Trained<Classifier>, ModelError> {
    if data.is_empty() {
        return Err(ModelError::Empty);
    }
    if let Some(&bad) = data.y.iter().find(|&&c| c >= data.num_classes) {
        return Err(ModelError::ClassOutOfRange {
            class: bad,
            num_classes: data.num_classes,
        });
    }
    if data.y.iter().all(|&c| c == data.y[0]) || data.num_classes < 2 {
        return Err(ModelError::SingleClass);
    }
    let mut model = Classifier::init(kind, data.x.cols(), data.num_classes, cfg.seed);
    let mut report = fit(&mut model, data, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train, val) = super::train::holdout_split(data, cfg.holdout_fraction, &mut rng);
    report.train_score = model.accuracy(&train)?;
    report.validation_score = if val.is_empty() {
        report.train_score
    } else {
        model.accuracy(&val)?
    };
    Ok(Trained { model, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights_predict_uniform() {
        let clf = Classifier::logistic_zeros(3, 4);
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 9.0]).unwrap();
        let p = clf.predict_proba(&x).unwrap();
        assert!(p.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn feature_mismatch_is_reported() {
        let clf = Classifier::logistic_zeros(3, 2);
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            clf.predict_proba(&x),
            Err(ModelError::FeatureMismatch { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn separable_two_points() {
        let data = Samples {
            x: Tensor::matrix(2, 1, vec![-1.0, 1.0]).unwrap(),
            y: vec![0, 1],
            num_classes: 2,
        };
        let cfg = TrainConfig {
            holdout_fraction: 0.0,
            learning_rate: 0.1,
            max_epochs: 200,
            ..TrainConfig::default()
        };
        let fitted = train_classifier(&data, ClassifierKind::LogisticRegression, &cfg).unwrap();
        assert_eq!(fitted.model.accuracy(&data).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let one_class = Samples {
            x: Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap(),
            y: vec![1, 1],
            num_classes: 2,
        };
        let cfg = TrainConfig::default();
        assert!(matches!(
            train_classifier(&one_class, ClassifierKind::Mlp, &cfg),
            Err(ModelError::SingleClass)
        ));
        let empty = Samples {
            x: Tensor::zeros(&[0, 1]),
            y: vec![],
            num_classes: 2,
        };
        assert!(matches!(
            train_classifier(&empty, ClassifierKind::Mlp, &cfg),
            Err(ModelError::Empty)
        ));
    }
}
