use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dense::Dense;
use super::{Classifier, ClassifierKind, ConditionalFlow, FlowConfig, ModelError};
use crate::ad::Tensor;
use crate::data::Scaler;

pub const FORMAT_VERSION: u32 = 1;

/// On-disk form of a trained model: shapes plus flat parameter arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub format_version: u32,
    /// `classifier-lr`, `classifier-mlp` or `flow`.
    pub kind: String,
    pub num_features: usize,
    pub num_classes: usize,
    /// Flow architecture; absent for classifiers.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowConfig>,
    pub shapes: Vec<Vec<usize>>,
    pub params: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaler: Option<Scaler>,
    pub feature_names: Vec<String>,
    pub seed: u64,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
}

const KIND_LR: &str = "classifier-lr";
const KIND_MLP: &str = "classifier-mlp";
const KIND_FLOW: &str = "flow";

fn flatten(layers: &[&Dense]) -> (Vec<Vec<usize>>, Vec<Vec<f64>>) {
    layers
        .iter()
        .flat_map(|l| [&l.weight, &l.bias])
        .map(|t| (t.shape().to_vec(), t.data().to_vec()))
        .unzip()
}

fn unflatten(shapes: &[Vec<usize>], params: &[Vec<f64>]) -> Result<Vec<Dense>, ModelError> {
    if shapes.len() != params.len() || !shapes.len().is_multiple_of(2) {
        return Err(ModelError::Format("parameter and shape lists do not pair up".into()));
    }
    let tensors = shapes
        .iter()
        .zip(params)
        .map(|(s, p)| Tensor::new(s.clone(), p.clone()).map_err(|e| ModelError::Format(e.to_string())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut layers = Vec::with_capacity(tensors.len() / 2);
    for pair in tensors.chunks(2) {
        let (w, b) = (&pair[0], &pair[1]);
        if w.rank() != 2 || b.rank() != 1 || w.cols() != b.len() {
            return Err(ModelError::Format(format!(
                "layer weight {:?} does not match bias {:?}",
                w.shape(),
                b.shape()
            )));
        }
        layers.push(Dense {
            weight: w.clone(),
            bias: b.clone(),
        });
    }
    Ok(layers)
}

fn check_chain(layers: &[Dense], input: usize, output: usize) -> Result<(), ModelError> {
    let mut width = input;
    for l in layers {
        if l.fan_in() != width {
            return Err(ModelError::Format(format!(
                "layer expects {} inputs, previous gives {width}",
                l.fan_in()
            )));
        }
        width = l.fan_out();
    }
    if width != output {
        return Err(ModelError::Format(format!("network output {width}, expected {output}")));
    }
    Ok(())
}

impl ModelDocument {
    pub fn from_classifier(model: &Classifier, feature_names: &[String], scaler: Option<&Scaler>, seed: u64) -> Self {
        let (shapes, params) = flatten(&model.layers.iter().collect::<Vec<_>>());
        Self {
            format_version: FORMAT_VERSION,
            kind: match model.kind {
                ClassifierKind::LogisticRegression => KIND_LR,
                ClassifierKind::Mlp => KIND_MLP,
            }
            .into(),
            num_features: model.num_features,
            num_classes: model.num_classes,
            flow: None,
            shapes,
            params,
            scaler: scaler.cloned(),
            feature_names: feature_names.to_vec(),
            seed,
            metadata: BTreeMap::new(),
        }
    }

    pub fn from_flow(model: &ConditionalFlow, feature_names: &[String], scaler: Option<&Scaler>, seed: u64) -> Self {
        let (shapes, params) = flatten(&model.couplings.iter().flatten().collect::<Vec<_>>());
        Self {
            format_version: FORMAT_VERSION,
            kind: KIND_FLOW.into(),
            num_features: model.num_features,
            num_classes: model.num_classes,
            flow: Some(model.config),
            shapes,
            params,
            scaler: scaler.cloned(),
            feature_names: feature_names.to_vec(),
            seed,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_classifier(&self) -> Result<Classifier, ModelError> {
        let kind = match self.kind.as_str() {
            KIND_LR => ClassifierKind::LogisticRegression,
            KIND_MLP => ClassifierKind::Mlp,
            other => return Err(ModelError::Format(format!("{other:?} is not a classifier"))),
        };
        let layers = unflatten(&self.shapes, &self.params)?;
        let expected_layers = match kind {
            ClassifierKind::LogisticRegression => 1,
            ClassifierKind::Mlp => 3,
        };
        if layers.len() != expected_layers {
            return Err(ModelError::Format(format!("{} layers for {}", layers.len(), self.kind)));
        }
        check_chain(&layers, self.num_features, self.num_classes)?;
        Ok(Classifier {
            kind,
            num_features: self.num_features,
            num_classes: self.num_classes,
            layers,
        })
    }

    pub fn to_flow(&self) -> Result<ConditionalFlow, ModelError> {
        if self.kind != KIND_FLOW {
            return Err(ModelError::Format(format!("{:?} is not a flow", self.kind)));
        }
        let config = self
            .flow
            .ok_or_else(|| ModelError::Format("flow document lacks its architecture".into()))?;
        let layers = unflatten(&self.shapes, &self.params)?;
        if layers.len() != 3 * config.layers {
            return Err(ModelError::Format(format!(
                "{} dense layers for {} couplings",
                layers.len(),
                config.layers
            )));
        }
        let couplings: Vec<Vec<Dense>> = layers.chunks(3).map(<[Dense]>::to_vec).collect();
        for net in &couplings {
            check_chain(net, self.num_features + self.num_classes, 2 * self.num_features)?;
        }
        Ok(ConditionalFlow {
            config,
            num_features: self.num_features,
            num_classes: self.num_classes,
            couplings,
        })
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a document, rejecting versions other than [`FORMAT_VERSION`].
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        match raw.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(ModelError::Format(format!(
                    "format_version {v} (this build reads {FORMAT_VERSION})"
                )))
            }
            None => return Err(ModelError::Format("missing format_version".into())),
        }
        Ok(serde_json::from_value(raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classifier_round_trip_is_exact() {
        let clf = Classifier::init(ClassifierKind::Mlp, 3, 2, 4);
        let doc = ModelDocument::from_classifier(&clf, &["a".into(), "b".into(), "c".into()], None, 4);
        let back = ModelDocument::from_json(&doc.to_json().unwrap()).unwrap();
        assert_eq!(back.to_classifier().unwrap(), clf);
    }

    #[test]
    fn flow_round_trip_is_exact() {
        let flow = ConditionalFlow::identity(2, 3, FlowConfig::default(), 1);
        let doc = ModelDocument::from_flow(&flow, &["u".into(), "v".into()], None, 1);
        let back = ModelDocument::from_json(&doc.to_json().unwrap()).unwrap();
        assert_eq!(back.to_flow().unwrap(), flow);
        assert!(back.to_classifier().is_err());
    }

    #[test]
    fn unknown_version_is_rejected() {
        let clf = Classifier::logistic_zeros(2, 2);
        let mut doc = ModelDocument::from_classifier(&clf, &["a".into(), "b".into()], None, 0);
        doc.format_version = 99;
        let err = ModelDocument::from_json(&doc.to_json().unwrap()).unwrap_err();
        assert!(matches!(err, ModelError::Format(m) if m.contains("99")));
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let clf = Classifier::logistic_zeros(2, 2);
        let mut doc = ModelDocument::from_classifier(&clf, &["a".into(), "b".into()], None, 0);
        doc.params[0].pop();
        assert!(doc.to_classifier().is_err());
    }
}
