//! Evaluation metrics for counterfactual batches.
//!
//! Proximity is measured in the standardized space the models see. Log
//! densities are shifted by a caller-supplied offset, which for a z-score
//! scaler converts them to original feature units.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ad::Tensor;
use crate::engine::CfSolution;
use crate::models::{Classifier, ConditionalFlow, ModelError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no counterfactuals to evaluate")]
    Empty,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mean and unbiased standard deviation; the deviation is absent for a single value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<f64>,
}

/// `None` for an empty slice.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Some(Summary { mean, std })
}

fn nonempty(x: &Tensor) -> Result<(), EvalError> {
    if x.rank() != 2 || x.rows() == 0 {
        return Err(EvalError::Empty);
    }
    Ok(())
}

fn fraction(flags: impl Iterator<Item = bool>, n: usize) -> f64 {
    flags.filter(|&f| f).count() as f64 / n as f64
}

fn row_l2(x0: &Tensor, x: &Tensor) -> Result<Vec<f64>, EvalError> {
    if x0.shape() != x.shape() {
        return Err(EvalError::Shape(format!(
            "x0 {:?} vs counterfactuals {:?}",
            x0.shape(),
            x.shape()
        )));
    }
    nonempty(x)?;
    Ok((0..x.rows())
        .map(|i| {
            x.row(i)
                .iter()
                .zip(x0.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect())
}

/// Fraction of rows the classifier assigns to `target`.
pub fn validity_metric(classifier: &Classifier, x: &Tensor, target: usize) -> Result<f64, EvalError> {
    nonempty(x)?;
    let pred = classifier.predict(x)?;
    Ok(fraction(pred.iter().map(|&p| p == target), pred.len()))
}

/// Row-wise Euclidean distances between factuals and counterfactuals.
pub fn proximity_metric(x0: &Tensor, x: &Tensor) -> Result<Summary, EvalError> {
    Ok(summarize(&row_l2(x0, x)?).expect("nonempty"))
}

/// Fraction of rows with `log p(x′ | target) ≥ delta_log`.
pub fn prob_plausibility_metric(
    flow: &ConditionalFlow,
    x: &Tensor,
    target: usize,
    delta_log: f64,
) -> Result<f64, EvalError> {
    nonempty(x)?;
    if delta_log == f64::NEG_INFINITY {
        return Ok(1.0);
    }
    let ld = flow.log_density(x, &vec![target; x.rows()])?;
    Ok(fraction(ld.iter().map(|&v| v >= delta_log), ld.len()))
}

/// Statistics of `log p(x′ | target) + offset`.
pub fn log_density_metric(
    flow: &ConditionalFlow,
    x: &Tensor,
    target: usize,
    offset: f64,
) -> Result<Summary, EvalError> {
    nonempty(x)?;
    let ld: Vec<f64> = flow
        .log_density(x, &vec![target; x.rows()])?
        .iter()
        .map(|v| v + offset)
        .collect();
    Ok(summarize(&ld).expect("nonempty"))
}

/// Metrics over the members of one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub id: usize,
    pub members: usize,
    pub validity: f64,
    pub proximity: Summary,
    pub prob_plausibility: f64,
    pub log_density: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub instances: usize,
    /// Fraction of instances whose counterfactual is both valid and plausible.
    pub coverage: f64,
    /// Validity over the covered instances; absent when none is covered.
    pub validity: Option<f64>,
    /// Validity over every instance.
    pub validity_all: f64,
    pub proximity: Summary,
    pub prob_plausibility: f64,
    pub log_density: Summary,
    pub active_groups: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
    pub groups: Vec<GroupReport>,
}

/// A batch of counterfactuals with everything needed to score it.
#[derive(Clone, Copy, Debug)]
pub struct EvalInput<'a> {
    pub classifier: &'a Classifier,
    pub flow: &'a ConditionalFlow,
    pub x0: &'a Tensor,
    pub counterfactuals: &'a Tensor,
    /// Group of each row.
    pub groups: &'a [usize],
    pub target: usize,
    pub delta_log: f64,
    /// Added to every log density before it is reported.
    pub density_offset: f64,
}

/// Aggregate and per-group metrics. Per-row quantities are computed once and
/// shared by every aggregate.
pub fn metric_report(input: &EvalInput<'_>) -> Result<MetricReport, EvalError> {
    let x = input.counterfactuals;
    let l2 = row_l2(input.x0, x)?;
    let n = l2.len();
    if input.groups.len() != n {
        return Err(EvalError::Shape(format!(
            "{} group ids for {n} rows",
            input.groups.len()
        )));
    }
    let valid: Vec<bool> = input
        .classifier
        .predict(x)?
        .iter()
        .map(|&p| p == input.target)
        .collect();
    let ld: Vec<f64> = input.flow.log_density(x, &vec![input.target; n])?;
    let plausible: Vec<bool> = ld
        .iter()
        .map(|&v| input.delta_log == f64::NEG_INFINITY || v >= input.delta_log)
        .collect();
    let shown: Vec<f64> = ld.iter().map(|v| v + input.density_offset).collect();

    let covered: Vec<usize> = (0..n).filter(|&i| valid[i] && plausible[i]).collect();
    let mut ids: Vec<usize> = input.groups.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let groups = ids
        .iter()
        .map(|&id| {
            let members: Vec<usize> = (0..n).filter(|&i| input.groups[i] == id).collect();
            let pick = |v: &[f64]| members.iter().map(|&i| v[i]).collect::<Vec<_>>();
            GroupReport {
                id,
                members: members.len(),
                validity: fraction(members.iter().map(|&i| valid[i]), members.len()),
                proximity: summarize(&pick(&l2)).expect("nonempty group"),
                prob_plausibility: fraction(members.iter().map(|&i| plausible[i]), members.len()),
                log_density: summarize(&pick(&shown)).expect("nonempty group"),
            }
        })
        .collect();
    Ok(MetricReport {
        instances: n,
        coverage: covered.len() as f64 / n as f64,
        validity: (!covered.is_empty()).then(|| fraction(covered.iter().map(|&i| valid[i]), covered.len())),
        validity_all: fraction(valid.iter().copied(), n),
        proximity: summarize(&l2).expect("nonempty"),
        prob_plausibility: fraction(plausible.iter().copied(), n),
        log_density: summarize(&shown).expect("nonempty"),
        active_groups: ids.len(),
        seconds: None,
        groups,
    })
}

/// Metrics of an optimized solution, grouped by its hard assignment.
pub fn solution_report(
    solution: &CfSolution,
    classifier: &Classifier,
    flow: &ConditionalFlow,
    density_offset: f64,
) -> Result<MetricReport, EvalError> {
    metric_report(&EvalInput {
        classifier,
        flow,
        x0: &solution.x0,
        counterfactuals: &solution.counterfactuals,
        groups: &solution.groups,
        target: solution.target,
        delta_log: solution.delta_log,
        density_offset,
    })
}

/// Smallest cosine similarity between two distinct rows; `None` with fewer than two rows.
pub fn min_pairwise_cosine(rows: &Tensor) -> Option<f64> {
    let k = rows.rows();
    let norm = |i: usize| rows.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut best: Option<f64> = None;
    for a in 0..k {
        for b in a + 1..k {
            let dot: f64 = rows.row(a).iter().zip(rows.row(b)).map(|(x, y)| x * y).sum();
            let denom = norm(a) * norm(b);
            let cos = if denom > 0.0 { dot / denom } else { 0.0 };
            best = Some(best.map_or(cos, |m| m.min(cos)));
        }
    }
    best
}

/// Mean Euclidean distance of the rows to their centroid.
pub fn mean_centroid_distance(rows: &Tensor) -> f64 {
    let (k, d) = (rows.rows(), rows.cols());
    if k == 0 {
        return 0.0;
    }
    let centroid: Vec<f64> = (0..d)
        .map(|j| (0..k).map(|g| rows.get(g, j)).sum::<f64>() / k as f64)
        .collect();
    (0..k)
        .map(|g| {
            rows.row(g)
                .iter()
                .zip(&centroid)
                .map(|(v, c)| (v - c) * (v - c))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / k as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::FlowConfig;

    #[test]
    fn summary_of_one_value_has_no_spread() {
        assert_eq!(summarize(&[]), None);
        assert_eq!(summarize(&[5.0]), Some(Summary { mean: 5.0, std: None }));
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(s.mean, 2.5);
        assert!((s.std.unwrap() - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn proximity_examples() {
        let x0 = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let x = Tensor::matrix(1, 2, vec![4.0, 5.0]).unwrap();
        assert_eq!(proximity_metric(&x0, &x).unwrap(), Summary { mean: 5.0, std: None });
        assert_eq!(proximity_metric(&x0, &x0).unwrap().mean, 0.0);
        assert!(matches!(
            proximity_metric(&x0, &Tensor::zeros(&[2, 2])),
            Err(EvalError::Shape(_))
        ));
        assert!(matches!(
            proximity_metric(&Tensor::zeros(&[0, 2]), &Tensor::zeros(&[0, 2])),
            Err(EvalError::Empty)
        ));
    }

    #[test]
    fn identity_flow_at_origin_is_standard_normal() {
        let flow = ConditionalFlow::identity(2, 2, FlowConfig::default(), 0);
        let x = Tensor::zeros(&[3, 2]);
        let s = log_density_metric(&flow, &x, 1, 0.0).unwrap();
        assert!((s.mean + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
        assert_eq!(s.std, Some(0.0));
        assert_eq!(prob_plausibility_metric(&flow, &x, 1, f64::NEG_INFINITY).unwrap(), 1.0);
        assert_eq!(prob_plausibility_metric(&flow, &x, 1, -1.0).unwrap(), 0.0);
    }

    #[test]
    fn validity_extremes() {
        // uniform probabilities break ties toward class 0
        let clf = Classifier::logistic_zeros(2, 3);
        let x = Tensor::zeros(&[4, 2]);
        assert_eq!(validity_metric(&clf, &x, 0).unwrap(), 1.0);
        assert_eq!(validity_metric(&clf, &x, 2).unwrap(), 0.0);
    }

    #[test]
    fn diversity_measures() {
        let ortho = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        assert_eq!(min_pairwise_cosine(&ortho), Some(0.0));
        let opposed = Tensor::matrix(3, 2, vec![1.0, 0.0, -2.0, 0.0, 1.0, 1.0]).unwrap();
        assert!((min_pairwise_cosine(&opposed).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(min_pairwise_cosine(&Tensor::ones(&[1, 2])), None);
        let square = Tensor::matrix(4, 2, vec![1.0, 1.0, -1.0, 1.0, -1.0, -1.0, 1.0, -1.0]).unwrap();
        assert!((mean_centroid_distance(&square) - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_centroid_distance(&Tensor::ones(&[3, 2])), 0.0);
    }
}
