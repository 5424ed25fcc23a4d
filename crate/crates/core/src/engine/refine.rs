use super::constraints::apply_constraints;
use super::objective::{hard_assignment, ENTROPY_TINY};
use super::optimize::CfParams;
use super::{CfMode, CfProblem, DistanceKind, EngineError};
use crate::ad::{Tape, Tensor};
use crate::models::argmax_row;

/// Number of log-spaced shift lengths tried per base vector.
const GRID_POINTS: usize = 64;
/// Range of realized shift lengths covered by the grid, in standardized units.
const GRID_MIN: f64 = 1e-2;
const GRID_MAX: f64 = 1e1;
/// Candidate rows per batched model evaluation.
const CHUNK: usize = 4096;
/// Score lead that makes a sparsemax row exactly one-hot.
const ONE_HOT_GAP: f64 = 2.0;
/// Subdivisions of the bracket around the best grid point.
const FINE_POINTS: usize = 16;

/// Magnitudes whose shift lengths `k·|s|` are log-spaced over the grid range.
fn magnitude_grid(norm: f64) -> Vec<f64> {
    if !(norm > 0.0 && norm.is_finite()) {
        return Vec::new();
    }
    let step = (GRID_MAX / GRID_MIN).ln() / (GRID_POINTS - 1) as f64;
    (0..GRID_POINTS)
        .map(|i| GRID_MIN * (step * i as f64).exp() / norm)
        .collect()
}

/// `d + λ·ℓ_v + λ_p·ℓ_p` of each candidate row against the instance it belongs to.
fn row_costs(problem: &CfProblem<'_>, owners: &[usize], candidates: &[f64]) -> Result<Vec<f64>, EngineError> {
    let d = problem.num_features();
    let hp = &problem.hyper;
    let mut costs = Vec::with_capacity(owners.len());
    for (owner_chunk, cand_chunk) in owners.chunks(CHUNK).zip(candidates.chunks(CHUNK * d)) {
        let mut x = cand_chunk.to_vec();
        for (i, v) in x.iter_mut().enumerate() {
            *v = v.clamp(problem.lower[i % d], problem.upper[i % d]);
        }
        let x = Tensor::matrix(owner_chunk.len(), d, x)?;
        let probs = problem.classifier.predict_proba(&x)?;
        let ld = if problem.delta_log == f64::NEG_INFINITY {
            vec![f64::INFINITY; x.rows()]
        } else {
            problem.flow.log_density(&x, &vec![problem.target; x.rows()])?
        };
        for (r, &n) in owner_chunk.iter().enumerate() {
            let (row, x0) = (x.row(r), problem.x0.row(n));
            let dist = match hp.distance {
                DistanceKind::L2 => row.iter().zip(x0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
                DistanceKind::L1 => row.iter().zip(x0).map(|(a, b)| (a - b).abs()).sum::<f64>(),
            };
            let p = probs.row(r);
            let other = (0..p.len())
                .filter(|&j| j != problem.target)
                .map(|j| p[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let validity = (other + hp.margin - p[problem.target]).max(0.0);
            let plausibility = (problem.delta_log - ld[r]).max(0.0);
            costs.push(dist + hp.lambda_validity * validity + hp.lambda_plausibility * plausibility);
        }
    }
    Ok(costs)
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| v * (v + ENTROPY_TINY).ln()).sum::<f64>()
}

fn mass_entropy(mass: &[f64]) -> f64 {
    let total: f64 = mass.iter().sum();
    entropy(&mass.iter().map(|m| m / total).collect::<Vec<_>>())
}

/// One candidate assignment of an instance and the magnitudes tried with it.
struct Move {
    /// `None` keeps the current assignment row, `Some(g)` moves to group `g`.
    group: Option<usize>,
    shift: Vec<f64>,
    magnitudes: Vec<f64>,
    costs: Vec<f64>,
}

impl Move {
    fn best(&self) -> (usize, f64) {
        self.costs
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least the current magnitude")
    }
}

/// Scores the magnitudes `from..` of every move in one batch per chunk.
fn score(problem: &CfProblem<'_>, moves: &mut [Vec<Move>], from: &[Vec<usize>]) -> Result<(), EngineError> {
    let mut owners = Vec::new();
    let mut candidates = Vec::new();
    for (i, row) in moves.iter().enumerate() {
        for (mv, &first) in row.iter().zip(&from[i]) {
            for &m in &mv.magnitudes[first..] {
                owners.push(i);
                candidates.extend(problem.x0.row(i).iter().zip(&mv.shift).map(|(x, s)| x + m * s));
            }
        }
    }
    let mut costs = row_costs(problem, &owners, &candidates)?.into_iter();
    for (i, row) in moves.iter_mut().enumerate() {
        for (mv, &first) in row.iter_mut().zip(&from[i]) {
            mv.costs.extend(costs.by_ref().take(mv.magnitudes.len() - first));
        }
    }
    Ok(())
}

/// With the shift vectors held fixed, moves every instance to the magnitude,
/// and in group-wise mode to the group, that minimizes the objective. Rows are
/// visited in order so the group-count entropy sees earlier moves. Returns
/// whether any parameter changed.
pub(crate) fn refine(problem: &CfProblem<'_>, params: &mut CfParams) -> Result<bool, EngineError> {
    let grouped = matches!(problem.mode, CfMode::GroupWise { k_max, .. } if k_max > 1);
    let magnitudes_free = problem.magnitudes_free();
    if !grouped && !magnitudes_free {
        return Ok(false);
    }
    let (n, d) = (problem.num_instances(), problem.num_features());
    let tape = Tape::new();
    let shifts = apply_constraints(tape.constant(params.u.clone()), &problem.constraints)?.value();
    let assignment = match &params.b {
        Some(b) => tape.constant(b.clone()).sparsemax()?.value(),
        None => Tensor::ones(&[n, 1]),
    };
    let k = shifts.rows();
    let active: Vec<usize> = {
        let hard = hard_assignment(&assignment);
        (0..k).filter(|&g| (0..n).any(|i| hard.get(i, g) > 0.0)).collect()
    };

    let mut moves: Vec<Vec<Move>> = (0..n)
        .map(|i| {
            let composed: Vec<f64> = (0..d)
                .map(|j| (0..k).map(|g| assignment.get(i, g) * shifts.get(g, j)).sum())
                .collect();
            let mut directions = vec![(None, composed)];
            if grouped {
                directions.extend(active.iter().map(|&g| (Some(g), shifts.row(g).to_vec())));
            }
            directions
                .into_iter()
                .map(|(group, shift)| {
                    let mut magnitudes = vec![params.h.data()[i].exp()];
                    if magnitudes_free {
                        magnitudes.extend(magnitude_grid(shift.iter().map(|v| v * v).sum::<f64>().sqrt()));
                    }
                    Move {
                        group,
                        shift,
                        magnitudes,
                        costs: Vec::new(),
                    }
                })
                .collect()
        })
        .collect();
    let zeros: Vec<Vec<usize>> = moves.iter().map(|row| vec![0; row.len()]).collect();
    score(problem, &mut moves, &zeros)?;
    if magnitudes_free {
        // zoom in between the neighbours of the best coarse grid point
        let from: Vec<Vec<usize>> = moves
            .iter()
            .map(|row| row.iter().map(|mv| mv.magnitudes.len()).collect())
            .collect();
        for mv in moves.iter_mut().flatten() {
            let (idx, _) = mv.best();
            let grid_end = mv.magnitudes.len() - 1;
            if idx == 0 || grid_end == 0 {
                continue;
            }
            let lo = mv.magnitudes[idx.saturating_sub(1).max(1)].ln();
            let hi = mv.magnitudes[(idx + 1).min(grid_end)].ln();
            mv.magnitudes
                .extend((1..FINE_POINTS).map(|t| (lo + (hi - lo) * t as f64 / FINE_POINTS as f64).exp()));
        }
        score(problem, &mut moves, &from)?;
    }

    let (ls, lk, _) = problem.group_weights();
    let mut mass: Vec<f64> = (0..k).map(|g| (0..n).map(|i| assignment.get(i, g)).sum()).collect();
    let mut changed = false;
    for (i, row_moves) in moves.iter().enumerate() {
        let p_row = assignment.row(i);
        let base_groups = if lk > 0.0 { mass_entropy(&mass) } else { 0.0 };
        let mut best: Option<(f64, &Move, usize)> = None;
        for opt in row_moves {
            let (m_idx, mut total) = opt.best();
            match opt.group {
                None => total += ls * entropy(p_row),
                Some(g) if lk > 0.0 => {
                    let moved: Vec<f64> = mass
                        .iter()
                        .zip(p_row)
                        .enumerate()
                        .map(|(j, (m, p))| m - p + if j == g { 1.0 } else { 0.0 })
                        .collect();
                    total += lk * (mass_entropy(&moved) - base_groups);
                }
                Some(_) => {}
            }
            if best.is_none_or(|(b, _, _)| total < b) {
                best = Some((total, opt, m_idx));
            }
        }
        let (_, opt, m_idx) = best.expect("at least one option");
        if m_idx > 0 {
            params.h.data_mut()[i] = opt.magnitudes[m_idx].ln();
            changed = true;
        }
        if let (Some(g), Some(b)) = (opt.group, params.b.as_mut()) {
            let already = argmax_row(p_row) == g && p_row[g] == 1.0;
            if !already {
                let row = &mut b.data_mut()[i * k..(i + 1) * k];
                let lead = (0..k)
                    .filter(|&j| j != g)
                    .map(|j| row[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                row[g] = lead + ONE_HOT_GAP;
                for (j, m) in mass.iter_mut().enumerate() {
                    *m += if j == g { 1.0 } else { 0.0 } - p_row[j];
                }
                changed = true;
            }
        }
    }
    Ok(changed)
}
