use serde::{Deserialize, Serialize};

use super::constraints::apply_constraints;
use super::{CfMode, CfProblem, DistanceKind, EngineError};
use crate::ad::{AdError, Tape, Tensor, Var};
use crate::models::{Classifier, ConditionalFlow};

/// Bias inside the entropy logarithms so that `0 · log 0` evaluates to zero.
pub(crate) const ENTROPY_TINY: f64 = 1e-12;

/// `Σ_n d(x₀_n, x′_n)` with the row-wise L2 or L1 norm.
pub fn distance_term<'t>(x0: Var<'t>, x: Var<'t>, kind: DistanceKind) -> Result<Var<'t>, AdError> {
    let diff = x.sub(&x0)?;
    match kind {
        DistanceKind::L2 => diff.l2_norm_rows()?.sum_all(),
        DistanceKind::L1 => diff.l1_norm_rows()?.sum_all(),
    }
}

/// Margin hinge `Σ_n max(max_{y≠t} p_ny + margin − p_nt, 0)` on a probability matrix.
pub(crate) fn margin_hinge<'t>(probs: Var<'t>, target: usize, margin: f64) -> Result<Var<'t>, AdError> {
    let c = probs.shape()[1];
    let others: Vec<usize> = (0..c).filter(|&j| j != target).collect();
    let p_target = probs.select_cols(&[target])?.sum(Some(1))?;
    let p_other = probs.select_cols(&others)?.max(Some(1))?;
    p_other.add_scalar(margin)?.sub(&p_target)?.hinge()?.sum_all()
}

/// Validity loss of the classifier at `x` for the desired class.
pub fn validity_term<'t>(
    classifier: &Classifier,
    x: Var<'t>,
    target: usize,
    margin: f64,
) -> Result<Var<'t>, EngineError> {
    let probs = classifier.predict_proba_var(x)?;
    Ok(margin_hinge(probs, target, margin)?)
}

/// `Σ_n max(δ − log p(x′_n | target), 0)`.
pub fn plausibility_term<'t>(
    flow: &ConditionalFlow,
    x: Var<'t>,
    target: usize,
    delta_log: f64,
) -> Result<Var<'t>, EngineError> {
    if delta_log == f64::NEG_INFINITY {
        return Ok(x.tape().constant(Tensor::from_parts(vec![], vec![0.0])));
    }
    let n = x.shape()[0];
    let ld = flow.log_density_var(x, &vec![target; n])?;
    Ok(ld.neg()?.add_scalar(delta_log)?.hinge()?.sum_all()?)
}

/// `−Σ_{n,k} p_nk log p_nk` over the rows of an assignment matrix.
pub fn assignment_entropy<'t>(p: Var<'t>) -> Result<Var<'t>, AdError> {
    p.xlogx(ENTROPY_TINY)?.sum_all()?.neg()
}

/// Entropy of the normalized column masses of an assignment matrix.
pub fn group_count_entropy<'t>(p: Var<'t>) -> Result<Var<'t>, AdError> {
    let mass = p.sum(Some(0))?;
    let total = mass.sum_all()?;
    let t = total.item();
    if t.is_nan() || t <= 0.0 {
        return Err(AdError::Contract("assignment matrix has no mass".into()));
    }
    mass.div_scalar(&total)?.xlogx(ENTROPY_TINY)?.sum_all()?.neg()
}

/// `−log det(D Dᵀ + εI)`.
pub fn diversity_term<'t>(d: Var<'t>, jitter: f64) -> Result<Var<'t>, AdError> {
    let k = d.shape()[0];
    let eye = d.tape().constant(Tensor::identity(k).map_indexed(|_, v| v * jitter));
    d.matmul(&d.transpose()?)?.add(&eye)?.cholesky_logdet()?.neg()
}

/// Where the assignment matrix comes from.
#[derive(Clone, Debug)]
pub enum AssignmentSource {
    /// Row-wise sparsemax of the scores.
    Soft,
    /// One-hot arg-max of the sparsemax rows, held constant.
    Hard,
    /// A constant matrix, e.g. the identity for local mode.
    Fixed(Tensor),
}

/// Unweighted term values and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TermValues {
    pub total: f64,
    pub distance: f64,
    pub validity: f64,
    pub plausibility: f64,
    pub assignment_entropy: f64,
    pub group_entropy: f64,
    pub diversity: f64,
}

/// The assembled objective on a tape.
pub struct Objective<'t> {
    pub total: Var<'t>,
    pub counterfactuals: Var<'t>,
    pub assignment: Var<'t>,
    pub shifts: Var<'t>,
    pub values: TermValues,
}

pub(crate) fn hard_assignment(p: &Tensor) -> Tensor {
    let k = p.cols();
    p.map_indexed(|i, _| {
        let row = p.row(i / k);
        let best = crate::models::argmax_row(row);
        if i % k == best {
            1.0
        } else {
            0.0
        }
    })
}

/// Builds the total loss for parameters bound on the tape: raw shifts `u`
/// (`K × D`), assignment scores `b` (`N × K`, only read for soft or hard
/// sources) and magnitude logits `h` (`N`).
pub fn build_objective<'t>(
    problem: &CfProblem<'_>,
    u: Var<'t>,
    b: Option<Var<'t>>,
    h: Var<'t>,
    source: &AssignmentSource,
) -> Result<Objective<'t>, EngineError> {
    let tape: &'t Tape = u.tape();
    let (n, d) = (problem.num_instances(), problem.num_features());
    let k = u.shape()[0];
    if u.shape() != [k, d] || h.shape() != [n] {
        return Err(EngineError::Shape(format!(
            "u {:?}, h {:?} for {n} instances of {d} features",
            u.shape(),
            h.shape()
        )));
    }
    if problem.mode == CfMode::Local && k != n {
        return Err(EngineError::Shape(format!("local mode needs {n} shifts, got {k}")));
    }

    let p = match source {
        AssignmentSource::Fixed(t) => tape.constant(t.clone()),
        AssignmentSource::Soft | AssignmentSource::Hard => {
            let b = b.ok_or_else(|| EngineError::Shape("assignment scores missing".into()))?;
            let soft = b.sparsemax()?;
            if matches!(source, AssignmentSource::Hard) {
                tape.constant(hard_assignment(&soft.value()))
            } else {
                soft
            }
        }
    };
    if p.shape() != [n, k] {
        return Err(EngineError::Shape(format!(
            "assignment {:?}, expected [{n}, {k}]",
            p.shape()
        )));
    }

    let shifts = apply_constraints(u, &problem.constraints)?;
    let x0 = tape.constant(problem.x0.clone());
    let mut x = x0.add(&p.matmul(&shifts)?.mul_rows(&h.exp()?)?)?;
    if problem.lower.iter().chain(&problem.upper).any(|b| b.is_finite()) {
        x = x.clamp_cols(&problem.lower, &problem.upper)?;
    }

    let hp = &problem.hyper;
    let dist = distance_term(x0, x, hp.distance)?;
    let valid = validity_term(problem.classifier, x, problem.target, hp.margin)?;
    let plaus = plausibility_term(problem.flow, x, problem.target, problem.delta_log)?;
    let mut total = dist
        .add(&valid.scale(hp.lambda_validity)?)?
        .add(&plaus.scale(hp.lambda_plausibility)?)?;
    let mut values = TermValues {
        distance: dist.item(),
        validity: valid.item(),
        plausibility: plaus.item(),
        ..TermValues::default()
    };

    let (ls, lk, ld) = problem.group_weights();
    if ls > 0.0 {
        let term = assignment_entropy(p)?;
        values.assignment_entropy = term.item();
        total = total.add(&term.scale(ls)?)?;
    }
    if lk > 0.0 {
        let term = group_count_entropy(p)?;
        values.group_entropy = term.item();
        total = total.add(&term.scale(lk)?)?;
    }
    if ld > 0.0 {
        let term = diversity_term(shifts, hp.det_jitter)?;
        values.diversity = term.item();
        total = total.add(&term.scale(ld)?)?;
    }
    values.total = total.item();
    Ok(Objective {
        total,
        counterfactuals: x,
        assignment: p,
        shifts,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf<'t>(t: &'t Tape, rows: usize, cols: usize, data: &[f64]) -> Var<'t> {
        t.param(Tensor::matrix(rows, cols, data.to_vec()).unwrap())
    }

    #[test]
    fn distance_examples() {
        let t = Tape::new();
        let x0 = leaf(&t, 2, 2, &[0.0, 0.0, 1.0, 1.0]);
        let x = leaf(&t, 2, 2, &[3.0, 4.0, 1.0, 1.0]);
        assert_eq!(distance_term(x0, x, DistanceKind::L2).unwrap().item(), 5.0);
        assert_eq!(distance_term(x0, x, DistanceKind::L1).unwrap().item(), 7.0);
        assert_eq!(distance_term(x0, x0, DistanceKind::L2).unwrap().item(), 0.0);
    }

    #[test]
    fn margin_hinge_examples() {
        let t = Tape::new();
        let p = leaf(&t, 1, 3, &[0.5, 0.3, 0.2]);
        assert!((margin_hinge(p, 1, 0.1).unwrap().item() - 0.3).abs() < 1e-15);
        let certain = leaf(&t, 2, 2, &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(margin_hinge(certain, 1, 0.1).unwrap().item(), 0.0);
        let uniform = leaf(&t, 4, 3, &[1.0 / 3.0; 12]);
        assert!((margin_hinge(uniform, 2, 0.1).unwrap().item() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn entropy_examples() {
        let t = Tape::new();
        let onehot = leaf(&t, 2, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(assignment_entropy(onehot).unwrap().item().abs() < 1e-10);
        let uniform = leaf(&t, 1, 4, &[0.25; 4]);
        assert!((assignment_entropy(uniform).unwrap().item() - 4f64.ln()).abs() < 1e-10);
        let one_group = leaf(&t, 3, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert!(group_count_entropy(one_group).unwrap().item().abs() < 1e-10);
        let even = leaf(&t, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!((group_count_entropy(even).unwrap().item() - 2f64.ln()).abs() < 1e-10);
        let empty = leaf(&t, 1, 2, &[0.0, 0.0]);
        assert!(group_count_entropy(empty).is_err());
    }

    #[test]
    fn diversity_examples() {
        let t = Tape::new();
        let ortho = leaf(&t, 2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let v = diversity_term(ortho, 1e-6).unwrap().item();
        assert!((v + 2.0 * (1.0 + 1e-6f64).ln()).abs() < 1e-15);
        let dup = leaf(&t, 2, 3, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(diversity_term(dup, 1e-6).unwrap().item() > 10.0);
    }

    #[test]
    fn hardening_picks_row_argmax() {
        let p = Tensor::matrix(2, 3, vec![0.2, 0.5, 0.3, 0.6, 0.0, 0.4]).unwrap();
        assert_eq!(hard_assignment(&p).data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }
}
