use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::constraints::FeatureAction;
use super::objective::{build_objective, hard_assignment, AssignmentSource, Objective, TermValues};
use super::refine::refine;
use super::{CfMode, CfProblem, EngineError};
use crate::ad::{adam_step, AdError, AdamConfig, AdamState, Tape, Tensor, Var};
use crate::models::{argmax_row, Classifier};

/// Initial standard deviation of the shift and assignment parameters.
const INIT_STD: f64 = 0.01;

/// Optimized parameters: raw shifts `u`, assignment scores `b`, magnitude logits `h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfParams {
    pub u: Tensor,
    pub b: Option<Tensor>,
    pub h: Tensor,
}

impl CfParams {
    /// Seeded starting point: `u` first, then `b`, drawn from one stream.
    pub fn init(problem: &CfProblem<'_>) -> Self {
        let (n, d, k) = (problem.num_instances(), problem.num_features(), problem.num_shifts());
        let mut rng = ChaCha8Rng::seed_from_u64(problem.hyper.seed);
        let u = Tensor::randn(&[k, d], INIT_STD, &mut rng);
        let b = matches!(problem.mode, CfMode::GroupWise { .. }).then(|| Tensor::randn(&[n, k], INIT_STD, &mut rng));
        // monotone columns start at a shift of INIT_STD in the allowed direction
        let start = INIT_STD.exp_m1().ln();
        let u = u.map_indexed(|i, v| match problem.constraints.action(i % d) {
            FeatureAction::IncreaseOnly | FeatureAction::DecreaseOnly => start,
            _ => v,
        });
        Self {
            u,
            b,
            h: Tensor::zeros(&[n]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    /// Already classified as the target class.
    AlreadyTarget,
    /// A feature lies outside its allowed range.
    OutsideRange { feature: usize },
}

/// Rows of a candidate batch that can be explained, and why the rest cannot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Selection {
    pub kept: Vec<usize>,
    pub skipped: Vec<(usize, SkipReason)>,
}

/// Drops rows already predicted as `target` and rows violating their own bounds.
pub fn select_instances(
    classifier: &Classifier,
    x0: &Tensor,
    target: usize,
    lower: &[f64],
    upper: &[f64],
) -> Result<Selection, EngineError> {
    let pred = classifier.predict(x0)?;
    let mut sel = Selection::default();
    for (i, &p) in pred.iter().enumerate() {
        let row = x0.row(i);
        if let Some(j) = (0..row.len()).find(|&j| row[j] < lower[j] || row[j] > upper[j]) {
            sel.skipped.push((i, SkipReason::OutsideRange { feature: j }));
        } else if p == target {
            sel.skipped.push((i, SkipReason::AlreadyTarget));
        } else {
            sel.kept.push(i);
        }
    }
    if !sel.skipped.is_empty() {
        log::warn!("{} of {} instances skipped", sel.skipped.len(), x0.rows());
    }
    Ok(sel)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub valid: bool,
    pub plausible: bool,
    pub l2: f64,
    /// `log p(x′ | target)` in the flow's coordinates.
    pub log_density: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CfSolution {
    pub mode: CfMode,
    pub target: usize,
    pub delta_log: f64,
    pub x0: Tensor,
    /// Counterfactuals under the hard assignment.
    pub counterfactuals: Tensor,
    /// Constrained base shift vectors (`K × D`).
    pub shifts: Tensor,
    /// Soft assignment matrix (`N × K`).
    pub assignment: Tensor,
    pub groups: Vec<usize>,
    pub magnitudes: Vec<f64>,
    pub records: Vec<InstanceRecord>,
    pub active_groups: usize,
    pub params: CfParams,
    pub trace: Vec<TermValues>,
    pub iterations: usize,
    /// Objective at the returned parameters with soft and with hardened assignments.
    pub soft_loss: f64,
    pub hard_loss: f64,
}

impl CfSolution {
    /// Relative change of the loss when the soft assignment is hardened.
    pub fn hard_soft_gap(&self) -> f64 {
        (self.hard_loss - self.soft_loss).abs() / self.soft_loss.abs().max(f64::MIN_POSITIVE)
    }

    pub fn num_instances(&self) -> usize {
        self.x0.rows()
    }
}

/// Instance group produced by [`extract_groups`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub id: usize,
    pub members: Vec<usize>,
    /// Base shift vector of the group.
    pub shift: Vec<f64>,
    pub mean_magnitude: f64,
    /// Mean realized shift `x′ − x₀` over members.
    pub mean_shift: Vec<f64>,
    /// `mean_shift` divided by its mean absolute component.
    pub normalized_shift: Vec<f64>,
}

fn source_for(problem: &CfProblem<'_>, hard: bool) -> AssignmentSource {
    let n = problem.num_instances();
    match problem.mode {
        CfMode::Local => AssignmentSource::Fixed(Tensor::identity(n)),
        CfMode::Global { .. } => AssignmentSource::Fixed(Tensor::ones(&[n, 1])),
        CfMode::GroupWise { .. } if hard => AssignmentSource::Hard,
        CfMode::GroupWise { .. } => AssignmentSource::Soft,
    }
}

struct Bound<'t> {
    u: Var<'t>,
    b: Option<Var<'t>>,
    h: Var<'t>,
}

fn bind<'t>(tape: &'t Tape, params: &CfParams, problem: &CfProblem<'_>) -> Bound<'t> {
    Bound {
        u: tape.param(params.u.clone()),
        b: params.b.as_ref().map(|b| tape.param(b.clone())),
        h: tape.leaf(params.h.clone(), problem.magnitudes_free()),
    }
}

fn evaluate<'t>(
    tape: &'t Tape,
    params: &CfParams,
    problem: &CfProblem<'_>,
    hard: bool,
) -> Result<(Objective<'t>, Bound<'t>), EngineError> {
    let bound = bind(tape, params, problem);
    let obj = build_objective(problem, bound.u, bound.b, bound.h, &source_for(problem, hard))?;
    Ok((obj, bound))
}

/// Minimizes the objective with full-batch Adam and returns the hardened
/// solution at the lowest-loss iterate.
pub fn optimize(problem: &CfProblem<'_>) -> Result<CfSolution, EngineError> {
    problem.validate()?;
    let hp = &problem.hyper;
    let mut adam = AdamConfig {
        beta2: hp.adam_beta2,
        ..AdamConfig::with_lr(hp.learning_rate)
    };
    let mut params = CfParams::init(problem);
    let mut state = fresh_state(problem, &params);
    let mut trace: Vec<TermValues> = Vec::new();
    let mut best = (f64::INFINITY, params.clone());

    for iteration in 0..hp.max_iters {
        let tape = Tape::new();
        let (obj, bound) = match evaluate(&tape, &params, problem, false) {
            Ok(v) => v,
            Err(EngineError::Ad(AdError::NonFinite(_))) => {
                return Err(EngineError::Divergence {
                    iteration,
                    last_finite_loss: trace.last().map_or(f64::NAN, |t| t.total),
                })
            }
            Err(e) => return Err(e),
        };
        trace.push(obj.values);
        if obj.values.total < best.0 {
            best = (obj.values.total, params.clone());
        }
        if stalled(&trace, hp.stall_window, hp.tolerance) {
            break;
        }
        if hp.refine_every > 0 && iteration > 0 && iteration % hp.refine_every == 0 && refine(problem, &mut params)? {
            forget_empty_groups(problem, &params, &mut state)?;
            continue;
        }
        tape.backward(obj.total)?;
        let mut grads = vec![bound.u.grad().expect("shift gradient")];
        grads.extend(bound.b.map(|b| b.grad().expect("assignment gradient")));
        if problem.magnitudes_free() {
            grads.push(bound.h.grad().expect("magnitude gradient"));
        }
        let mut active: Vec<&mut Tensor> = vec![&mut params.u];
        active.extend(params.b.as_mut());
        if problem.magnitudes_free() {
            active.push(&mut params.h);
        }
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        adam.lr = hp.learning_rate * hp.lr_decay.powf(iteration as f64 / hp.max_iters as f64);
        adam_step(&mut active, &grad_refs, &mut state, &adam);
    }
    let iterations = trace.len();
    let mut params = best.1;
    if hp.refine_every > 0 {
        refine(problem, &mut params)?;
    }
    log::debug!(
        "{} mode: {iterations} iterations, best loss {:.6e}",
        problem.mode.name(),
        best.0
    );
    finish(problem, params, trace, iterations)
}

/// Clears the Adam moments of base vectors that have no members.
fn forget_empty_groups(problem: &CfProblem<'_>, params: &CfParams, state: &mut AdamState) -> Result<(), EngineError> {
    let Some(b) = &params.b else {
        return Ok(());
    };
    let tape = Tape::new();
    let hard = hard_assignment(&tape.constant(b.clone()).sparsemax()?.value());
    let d = problem.num_features();
    for g in 0..hard.cols() {
        if (0..hard.rows()).all(|i| hard.get(i, g) == 0.0) {
            state.reset(0, g * d..(g + 1) * d);
        }
    }
    Ok(())
}

fn fresh_state(problem: &CfProblem<'_>, params: &CfParams) -> AdamState {
    let mut active = vec![&params.u];
    active.extend(params.b.as_ref());
    if problem.magnitudes_free() {
        active.push(&params.h);
    }
    AdamState::new(&active)
}

fn finish(
    problem: &CfProblem<'_>,
    params: CfParams,
    trace: Vec<TermValues>,
    iterations: usize,
) -> Result<CfSolution, EngineError> {
    let tape = Tape::new();
    let (soft, _) = evaluate(&tape, &params, problem, false)?;
    let (hard, _) = evaluate(&tape, &params, problem, true)?;
    let assignment = soft.assignment.value();
    let groups: Vec<usize> = (0..assignment.rows()).map(|i| argmax_row(assignment.row(i))).collect();
    let counterfactuals = hard.counterfactuals.value();
    let n = problem.num_instances();

    let pred = problem.classifier.predict(&counterfactuals)?;
    let ld = problem.flow.log_density(&counterfactuals, &vec![problem.target; n])?;
    let records = (0..n)
        .map(|i| InstanceRecord {
            valid: pred[i] == problem.target,
            plausible: ld[i] >= problem.delta_log,
            l2: l2(counterfactuals.row(i), problem.x0.row(i)),
            log_density: ld[i],
        })
        .collect();
    let mut seen = vec![false; problem.num_shifts()];
    groups.iter().for_each(|&g| seen[g] = true);

    Ok(CfSolution {
        mode: problem.mode,
        target: problem.target,
        delta_log: problem.delta_log,
        x0: problem.x0.clone(),
        counterfactuals,
        shifts: hard.shifts.value(),
        assignment,
        groups,
        magnitudes: params.h.data().iter().map(|h| h.exp()).collect(),
        records,
        active_groups: seen.iter().filter(|&&s| s).count(),
        soft_loss: soft.values.total,
        hard_loss: hard.values.total,
        params,
        trace,
        iterations,
    })
}

/// True once the best loss of the last `window` steps is not `tol` below the best before them.
fn stalled(trace: &[TermValues], window: usize, tol: f64) -> bool {
    if trace.len() <= window {
        return false;
    }
    let (before, recent) = trace.split_at(trace.len() - window);
    let best = |s: &[TermValues]| s.iter().map(|t| t.total).fold(f64::INFINITY, f64::min);
    best(before) - best(recent) < tol
}

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Partitions instances by hard assignment, largest groups first.
pub fn extract_groups(solution: &CfSolution) -> Vec<Group> {
    let d = solution.x0.cols();
    let k = solution.shifts.rows();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &g) in solution.groups.iter().enumerate() {
        members[g].push(i);
    }
    let mut groups: Vec<Group> = members
        .into_iter()
        .enumerate()
        .filter(|(_, m)| !m.is_empty())
        .map(|(id, members)| {
            let count = members.len() as f64;
            let mut mean_shift = vec![0.0; d];
            for &i in &members {
                for (j, m) in mean_shift.iter_mut().enumerate() {
                    *m += solution.counterfactuals.get(i, j) - solution.x0.get(i, j);
                }
            }
            mean_shift.iter_mut().for_each(|m| *m /= count);
            let scale = mean_shift.iter().map(|m| m.abs()).sum::<f64>() / d as f64;
            let normalized_shift = mean_shift
                .iter()
                .map(|m| if scale > 0.0 { m / scale } else { 0.0 })
                .collect();
            Group {
                id,
                shift: solution.shifts.row(id).to_vec(),
                mean_magnitude: members.iter().map(|&i| solution.magnitudes[i]).sum::<f64>() / count,
                members,
                mean_shift,
                normalized_shift,
            }
        })
        .collect();
    groups.sort_by(|a, b| b.members.len().cmp(&a.members.len()).then(a.id.cmp(&b.id)));
    groups
}
