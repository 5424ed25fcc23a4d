#![allow(dead_code)]

use cfx_core::ad::{sparsemax_threshold, AdError, Tape, Tensor, Var};
use cfx_core::engine::{
    build_objective, AssignmentSource, CfMode, CfProblem, Constraints, DistanceKind, EngineError, FeatureAction,
    FeatureConstraint,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

/// Worst elementwise relative error between the tape gradient and central
/// finite differences of `f` with respect to every input.
///
/// The denominator is `max(|analytic|, |numeric|, 1e-3 · max(‖analytic‖∞, 1))`
/// so that entries far below the gradient's scale are compared absolutely.
pub fn fd_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, AdError>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&tape, &vars).expect("forward");
    tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor> = vars.iter().map(|v| v.grad().unwrap()).collect();

    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).expect("forward").item()
    };
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let scale = analytic[k].data().iter().fold(1.0f64, |a, v| a.max(v.abs()));
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            let mut d = input.data().to_vec();
            d[i] += FD_STEP;
            plus[k].set_data(&d);
            d[i] -= 2.0 * FD_STEP;
            minus[k].set_data(&d);
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let a = analytic[k].data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-3 * scale);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

/// Brute-force simplex projection: try every support set, keep the feasible
/// candidate closest to `z`.
pub fn simplex_projection_by_enumeration(z: &[f64]) -> Vec<f64> {
    let k = z.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << k) {
        let support: Vec<usize> = (0..k).filter(|i| mask & (1 << i) != 0).collect();
        // stationarity on the support: p_i = z_i − τ with Σ p_i = 1
        let tau = (support.iter().map(|&i| z[i]).sum::<f64>() - 1.0) / support.len() as f64;
        let mut p = vec![0.0; k];
        let mut feasible = true;
        for &i in &support {
            p[i] = z[i] - tau;
            if p[i] < -1e-15 {
                feasible = false;
            }
        }
        if !feasible {
            continue;
        }
        let dist: f64 = p.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, p));
        }
    }
    best.expect("some support is always feasible").1
}

/// A random MLP classifier and a flow whose couplings are perturbed away from the identity.
pub fn toy_models(
    num_features: usize,
    num_classes: usize,
    seed: u64,
) -> (cfx_core::models::Classifier, cfx_core::models::ConditionalFlow) {
    use cfx_core::models::{Classifier, ClassifierKind, ConditionalFlow, FlowConfig};
    let clf = Classifier::init(ClassifierKind::Mlp, num_features, num_classes, seed);
    let config = FlowConfig {
        layers: 2,
        hidden: 8,
        ..FlowConfig::default()
    };
    let mut flow = ConditionalFlow::identity(num_features, num_classes, config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for net in &mut flow.couplings {
        let last = net.last_mut().expect("conditioner layers");
        last.weight = Tensor::randn(last.weight.shape(), 0.1, &mut rng);
        last.bias = Tensor::randn(last.bias.shape(), 0.1, &mut rng);
    }
    (clf, flow)
}

pub type Prim = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, AdError>;

/// One differentiable primitive with a generator of random inputs.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    pub f: Prim,
}

fn case(name: &'static str, inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: Prim) -> GradCase {
    GradCase { name, inputs, f }
}

/// Contracts a tensor-valued result to a scalar with fixed pseudo-random weights,
/// so every output entry contributes to the checked gradient.
fn contract<'t>(tape: &'t Tape, out: Var<'t>) -> Result<Var<'t>, AdError> {
    let shape = out.shape();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 13.0).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    out.mul(&w)?.sum_all()
}

pub fn mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::randn(&[r, c], 1.0, rng)
}

fn vec_(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::randn(&[n], 1.0, rng)
}

/// Every tape primitive, plus one composite expression.
pub fn primitive_cases() -> Vec<GradCase> {
    vec![
        case(
            "add",
            |r| vec![mat(r, 3, 4), mat(r, 3, 4)],
            |t, v| contract(t, v[0].add(&v[1])?),
        ),
        case(
            "sub",
            |r| vec![mat(r, 3, 4), vec_(r, 4)],
            |t, v| contract(t, v[0].sub(&v[1])?),
        ),
        case(
            "sub rev",
            |r| vec![vec_(r, 4), mat(r, 3, 4)],
            |t, v| contract(t, v[0].sub(&v[1])?),
        ),
        case(
            "mul",
            |r| vec![mat(r, 3, 4), mat(r, 3, 4)],
            |t, v| contract(t, v[0].mul(&v[1])?),
        ),
        case(
            "mul bcast",
            |r| vec![mat(r, 3, 4), vec_(r, 4)],
            |t, v| contract(t, v[0].mul(&v[1])?),
        ),
        case(
            "matmul",
            |r| vec![mat(r, 3, 4), mat(r, 4, 2)],
            |t, v| contract(t, v[0].matmul(&v[1])?),
        ),
        case(
            "transpose",
            |r| vec![mat(r, 3, 4)],
            |t, v| contract(t, v[0].transpose()?),
        ),
        case(
            "cholesky_logdet(AAᵀ+εI)",
            |r| vec![mat(r, 3, 5)],
            |t, v| {
                let m = v[0].matmul(&v[0].transpose()?)?;
                let eps = t.constant(Tensor::identity(3).map(|x| x * 1e-6)?);
                m.add(&eps)?.cholesky_logdet()
            },
        ),
        case(
            "mul_rows",
            |r| vec![mat(r, 3, 4), vec_(r, 3)],
            |t, v| contract(t, v[0].mul_rows(&v[1])?),
        ),
        case(
            "div_scalar",
            |r| vec![mat(r, 2, 3), Tensor::scalar(1.5 + r.random::<f64>()).unwrap()],
            |t, v| contract(t, v[0].div_scalar(&v[1])?),
        ),
        case("exp", |r| vec![mat(r, 2, 3)], |t, v| contract(t, v[0].exp()?)),
        case(
            "log",
            |r| vec![mat(r, 2, 3).map(|x| x.abs() + 0.5).unwrap()],
            |t, v| contract(t, v[0].log()?),
        ),
        case("neg", |r| vec![mat(r, 2, 3)], |t, v| contract(t, v[0].neg()?)),
        case("tanh", |r| vec![mat(r, 2, 3)], |t, v| contract(t, v[0].tanh()?)),
        case("square", |r| vec![mat(r, 2, 3)], |t, v| contract(t, v[0].square()?)),
        case("scale", |r| vec![mat(r, 2, 3)], |t, v| contract(t, v[0].scale(-2.5)?)),
        case(
            "add_scalar",
            |r| vec![mat(r, 2, 3)],
            |t, v| contract(t, v[0].add_scalar(0.7)?),
        ),
        case("relu", |r| vec![mat(r, 2, 3)], |t, v| contract(t, v[0].relu()?)),
        case("hinge", |r| vec![vec_(r, 5)], |t, v| contract(t, v[0].hinge()?)),
        case("softplus", |r| vec![mat(r, 2, 3)], |t, v| contract(t, v[0].softplus()?)),
        case("sigmoid", |r| vec![mat(r, 2, 3)], |t, v| contract(t, v[0].sigmoid()?)),
        case(
            "xlogx",
            |r| vec![mat(r, 2, 3).map(|x| x.abs() + 0.05).unwrap()],
            |t, v| contract(t, v[0].xlogx(1e-12)?),
        ),
        case(
            "clamp",
            |r| vec![mat(r, 4, 2)],
            |t, v| contract(t, v[0].clamp_cols(&[-0.5, -1.0], &[0.5, 1.0])?),
        ),
        case("sum all", |r| vec![mat(r, 3, 4)], |t, v| contract(t, v[0].sum(None)?)),
        case(
            "sum axis0",
            |r| vec![mat(r, 3, 4)],
            |t, v| contract(t, v[0].sum(Some(0))?),
        ),
        case(
            "sum axis1",
            |r| vec![mat(r, 3, 4)],
            |t, v| contract(t, v[0].sum(Some(1))?),
        ),
        case(
            "mean axis0",
            |r| vec![mat(r, 3, 4)],
            |t, v| contract(t, v[0].mean(Some(0))?),
        ),
        case("mean all", |r| vec![vec_(r, 5)], |t, v| contract(t, v[0].mean(None)?)),
        case(
            "max axis1",
            |r| vec![mat(r, 3, 4)],
            |t, v| contract(t, v[0].max(Some(1))?),
        ),
        case(
            "max axis0",
            |r| vec![mat(r, 3, 4)],
            |t, v| contract(t, v[0].max(Some(0))?),
        ),
        case("softmax", |r| vec![mat(r, 3, 4)], |t, v| contract(t, v[0].softmax()?)),
        case(
            "log_softmax",
            |r| vec![mat(r, 3, 4)],
            |t, v| contract(t, v[0].log_softmax()?),
        ),
        case(
            "sparsemax",
            |r| vec![mat(r, 3, 5)],
            |t, v| contract(t, v[0].sparsemax()?),
        ),
        case(
            "l2_norm_rows",
            |r| vec![mat(r, 3, 4)],
            |t, v| contract(t, v[0].l2_norm_rows()?),
        ),
        case(
            "l1_norm_rows",
            |r| vec![mat(r, 3, 4)],
            |t, v| contract(t, v[0].l1_norm_rows()?),
        ),
        case(
            "select_cols",
            |r| vec![mat(r, 3, 4)],
            |t, v| contract(t, v[0].select_cols(&[2, 0, 2])?),
        ),
        case(
            "concat_cols",
            |r| vec![mat(r, 3, 2), mat(r, 3, 1)],
            |t, v| contract(t, v[0].concat_cols(&v[1])?),
        ),
        // entropy of sparsemax rows plus a log-det on the same parameters
        case(
            "composite",
            |r| vec![mat(r, 4, 3)],
            |t, v| {
                let p = v[0].scale(3.0)?.sparsemax()?;
                let ent = p.xlogx(1e-12)?.sum_all()?.neg()?;
                let m = v[0].transpose()?.matmul(&v[0])?;
                let eps = t.constant(Tensor::identity(3).map(|x| x * 1e-6)?);
                ent.add(&m.add(&eps)?.cholesky_logdet()?)
            },
        ),
    ]
}

/// Worst relative error of a case over seeds `0..seeds`.
pub fn worst_case_error(case: &GradCase, seeds: u64) -> f64 {
    (0..seeds)
        .map(|seed| {
            let inputs = (case.inputs)(&mut ChaCha8Rng::seed_from_u64(seed));
            fd_check(&inputs, case.f)
        })
        .fold(0.0, f64::max)
}

pub const KINK: f64 = 1e-4;

pub fn mixed_constraints() -> Constraints {
    let action = |action| FeatureConstraint {
        action,
        ..FeatureConstraint::default()
    };
    Constraints::new(vec![
        action(FeatureAction::Free),
        action(FeatureAction::IncreaseOnly),
        action(FeatureAction::DecreaseOnly),
        action(FeatureAction::Frozen),
    ])
    .unwrap()
}

pub fn to_ad(e: EngineError) -> AdError {
    match e {
        EngineError::Ad(a) => a,
        other => AdError::Contract(other.to_string()),
    }
}

/// True when no hinge, max, sparsemax support or L1 kink lies within `KINK` of the point.
pub fn away_from_kinks(problem: &CfProblem<'_>, u: &Tensor, b: &Tensor, h: &Tensor) -> bool {
    let tape = Tape::new();
    let obj = build_objective(
        problem,
        tape.constant(u.clone()),
        Some(tape.constant(b.clone())),
        tape.constant(h.clone()),
        &AssignmentSource::Soft,
    )
    .unwrap();
    let x = obj.counterfactuals.value();
    let probs = problem.classifier.predict_proba(&x).unwrap();
    let ld = problem.flow.log_density(&x, &vec![problem.target; x.rows()]).unwrap();
    for (i, &ld_i) in ld.iter().enumerate() {
        let p = probs.row(i);
        let mut others: Vec<f64> = (0..p.len()).filter(|&j| j != problem.target).map(|j| p[j]).collect();
        others.sort_by(|a, b| b.total_cmp(a));
        if (others[0] + problem.hyper.margin - p[problem.target]).abs() < KINK {
            return false;
        }
        if others.len() > 1 && others[0] - others[1] < KINK {
            return false;
        }
        if (problem.delta_log - ld_i).abs() < KINK {
            return false;
        }
        let row = b.row(i);
        let tau = sparsemax_threshold(row);
        if row.iter().any(|z| (z - tau).abs() < KINK) {
            return false;
        }
        if problem.hyper.distance == DistanceKind::L1 {
            let moved = (0..x.cols()).filter(|&j| problem.constraints.action(j) != FeatureAction::Frozen);
            if moved.clone().any(|j| (x.get(i, j) - problem.x0.get(i, j)).abs() < KINK) {
                return false;
            }
        }
    }
    true
}

/// Worst relative error of the assembled group-wise objective over seeds `0..seeds`,
/// with mixed constraints and alternating L1/L2 distance.
pub fn assembled_objective_error(seeds: u64) -> f64 {
    let (n, d, c, k) = (3, 4, 3, 2);
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (clf, flow) = toy_models(d, c, seed);
        let x0 = Tensor::randn(&[n, d], 1.0, &mut rng);
        let target = rng.random_range(0..c);
        let mode = CfMode::GroupWise {
            k_max: k,
            auto_group_count: true,
        };
        let mut problem = CfProblem::new(&clf, &flow, x0.clone(), target, mode, 0.0);
        problem.constraints = mixed_constraints();
        problem.hyper.distance = if seed % 2 == 0 {
            DistanceKind::L2
        } else {
            DistanceKind::L1
        };
        // moderate weights keep the loss small enough for central differences
        let hp = &mut problem.hyper;
        (
            hp.lambda_validity,
            hp.lambda_plausibility,
            hp.lambda_assignment,
            hp.lambda_groups,
            hp.lambda_diversity,
        ) = (10.0, 0.5, 2.0, 3.0, 0.7);
        let ld0 = flow.log_density(&x0, &vec![target; n]).unwrap();
        problem.delta_log = ld0.iter().sum::<f64>() / n as f64;

        let mut inputs = None;
        for _ in 0..50 {
            let u = Tensor::randn(&[k, d], 0.5, &mut rng);
            let b = Tensor::randn(&[n, k], 1.0, &mut rng);
            let h = Tensor::randn(&[n], 0.3, &mut rng);
            if away_from_kinks(&problem, &u, &b, &h) {
                inputs = Some(vec![u, b, h]);
                break;
            }
        }
        let inputs = inputs.expect("a smooth draw");
        let err = fd_check(&inputs, |_tape: &Tape, v: &[Var]| {
            build_objective(&problem, v[0], Some(v[1]), v[2], &AssignmentSource::Soft)
                .map(|o| o.total)
                .map_err(to_ad)
        });
        worst = worst.max(err);
    }
    worst
}
