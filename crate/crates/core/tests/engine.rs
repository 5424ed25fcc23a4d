//! Objective gradients, mode reductions and optimizer guarantees on toy problems.

mod common;

use cfx_core::ad::{Tape, Tensor};
use cfx_core::engine::{
    build_objective, extract_groups, optimize, select_instances, AssignmentSource, CfMode, CfProblem, CfSolution,
    Constraints, EngineError, FeatureAction, FeatureConstraint, SkipReason,
};
use cfx_core::models::{Classifier, ConditionalFlow};
use common::{assembled_objective_error, toy_models};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn assembled_objective_matches_finite_differences() {
    let worst = assembled_objective_error(100);
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

#[test]
fn zero_weights_and_zero_shift_give_zero_loss() {
    let (clf, flow) = toy_models(3, 2, 1);
    let x0 = Tensor::randn(&[4, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let mode = CfMode::GroupWise {
        k_max: 2,
        auto_group_count: true,
    };
    let mut problem = CfProblem::new(&clf, &flow, x0, 1, mode, 0.0);
    let hp = &mut problem.hyper;
    (
        hp.lambda_validity,
        hp.lambda_plausibility,
        hp.lambda_assignment,
        hp.lambda_groups,
        hp.lambda_diversity,
    ) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let tape = Tape::new();
    let obj = build_objective(
        &problem,
        tape.param(Tensor::zeros(&[2, 3])),
        Some(tape.param(Tensor::zeros(&[4, 2]))),
        tape.param(Tensor::zeros(&[4])),
        &AssignmentSource::Soft,
    )
    .unwrap();
    assert_eq!(obj.values.total, 0.0);
}

#[test]
fn single_local_instance_is_the_three_term_objective() {
    let (clf, flow) = toy_models(3, 3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0 = Tensor::randn(&[1, 3], 1.0, &mut rng);
    let u = Tensor::randn(&[1, 3], 0.7, &mut rng);
    let problem = CfProblem::new(&clf, &flow, x0.clone(), 2, CfMode::Local, 5.0);
    let tape = Tape::new();
    let obj = build_objective(
        &problem,
        tape.param(u.clone()),
        None,
        tape.constant(Tensor::zeros(&[1])),
        &AssignmentSource::Fixed(Tensor::identity(1)),
    )
    .unwrap();

    let x: Vec<f64> = x0.data().iter().zip(u.data()).map(|(a, b)| a + b).collect();
    let xt = Tensor::matrix(1, 3, x.clone()).unwrap();
    let dist = x
        .iter()
        .zip(x0.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let p = clf.predict_proba(&xt).unwrap();
    let validity = (p.get(0, 0).max(p.get(0, 1)) + 0.1 - p.get(0, 2)).max(0.0);
    let plaus = (5.0 - flow.log_density(&xt, &[2]).unwrap()[0]).max(0.0);
    let expected = dist + 1e5 * validity + 1e4 * plaus;
    assert!((obj.values.total - expected).abs() <= 1e-12 * expected.abs().max(1.0));
}

#[test]
fn one_group_objective_equals_global_objective() {
    let (clf, flow) = toy_models(3, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = Tensor::randn(&[5, 3], 1.0, &mut rng);
    let u = Tensor::randn(&[1, 3], 0.5, &mut rng);
    let b = Tensor::randn(&[5, 1], 1.0, &mut rng);
    let h = Tensor::zeros(&[5]);
    let group = CfMode::GroupWise {
        k_max: 1,
        auto_group_count: true,
    };
    let global = CfMode::Global { use_magnitude: false };
    let mut gp = CfProblem::new(&clf, &flow, x0.clone(), 1, group, -1.0);
    gp.freeze_magnitudes = true;
    let pp = CfProblem::new(&clf, &flow, x0, 1, global, -1.0);

    let tape = Tape::new();
    let g = build_objective(
        &gp,
        tape.param(u.clone()),
        Some(tape.param(b)),
        tape.constant(h.clone()),
        &AssignmentSource::Soft,
    )
    .unwrap();
    let p = build_objective(
        &pp,
        tape.param(u),
        None,
        tape.constant(h),
        &AssignmentSource::Fixed(Tensor::ones(&[5, 1])),
    )
    .unwrap();
    assert!((g.values.total - p.values.total).abs() <= 1e-12 * p.values.total.abs().max(1.0));
    assert_eq!(g.values, p.values);
}

#[test]
fn identity_assignment_sums_local_objectives() {
    let (n, d) = (6, 3);
    let (clf, flow) = toy_models(d, 2, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = Tensor::randn(&[n, d], 1.0, &mut rng);
    let u = Tensor::randn(&[n, d], 0.8, &mut rng);
    let h = Tensor::zeros(&[n]);
    let delta = 0.5;

    let group = CfMode::GroupWise {
        k_max: n,
        auto_group_count: false,
    };
    let mut gp = CfProblem::new(&clf, &flow, x0.clone(), 0, group, delta);
    gp.freeze_magnitudes = true;
    (gp.hyper.lambda_assignment, gp.hyper.lambda_diversity) = (0.0, 0.0);
    let tape = Tape::new();
    let grouped = build_objective(
        &gp,
        tape.param(u.clone()),
        None,
        tape.constant(h.clone()),
        &AssignmentSource::Fixed(Tensor::identity(n)),
    )
    .unwrap()
    .values
    .total;
    let local_all = build_objective(
        &CfProblem::new(&clf, &flow, x0.clone(), 0, CfMode::Local, delta),
        tape.param(u.clone()),
        None,
        tape.constant(h),
        &AssignmentSource::Fixed(Tensor::identity(n)),
    )
    .unwrap()
    .values
    .total;

    let mut sum = 0.0;
    for i in 0..n {
        let xi = x0.select_rows(&[i]);
        let problem = CfProblem::new(&clf, &flow, xi, 0, CfMode::Local, delta);
        let obj = build_objective(
            &problem,
            tape.param(u.select_rows(&[i])),
            None,
            tape.constant(Tensor::zeros(&[1])),
            &AssignmentSource::Fixed(Tensor::identity(1)),
        )
        .unwrap();
        sum += obj.values.total;
    }
    for total in [grouped, local_all] {
        assert!((total - sum).abs() <= 1e-12 * sum.abs().max(1.0), "{total} vs {sum}");
    }
}

fn quick(problem: &mut CfProblem<'_>, iters: usize) {
    problem.hyper.max_iters = iters;
    problem.hyper.refine_every = iters / 3;
}

fn same_bits(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn assert_identical(a: &CfSolution, b: &CfSolution) {
    assert!(same_bits(&a.counterfactuals, &b.counterfactuals));
    assert!(same_bits(&a.shifts, &b.shifts));
    assert_eq!(
        a.magnitudes.iter().map(|m| m.to_bits()).collect::<Vec<_>>(),
        b.magnitudes.iter().map(|m| m.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(a.trace.len(), b.trace.len());
    for (x, y) in a.trace.iter().zip(&b.trace) {
        assert_eq!(x.total.to_bits(), y.total.to_bits());
    }
}

fn toy_problem<'a>(clf: &'a Classifier, flow: &'a ConditionalFlow, n: usize, mode: CfMode, seed: u64) -> CfProblem<'a> {
    let x0 = Tensor::randn(&[n, clf.num_features], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    let ld = flow.log_density(&x0, &vec![1; n]).unwrap();
    let delta = ld.iter().sum::<f64>() / n as f64;
    let mut problem = CfProblem::new(clf, flow, x0, 1, mode, delta);
    quick(&mut problem, 60);
    problem
}

#[test]
fn one_group_optimization_is_bit_identical_to_global() {
    let (clf, flow) = toy_models(3, 2, 5);
    for use_magnitude in [false, true] {
        let group = CfMode::GroupWise {
            k_max: 1,
            auto_group_count: true,
        };
        let mut gp = toy_problem(&clf, &flow, 8, group, 5);
        gp.freeze_magnitudes = !use_magnitude;
        let pp = toy_problem(&clf, &flow, 8, CfMode::Global { use_magnitude }, 5);
        assert_identical(&optimize(&gp).unwrap(), &optimize(&pp).unwrap());
    }
}

#[test]
fn optimization_is_deterministic_per_seed() {
    let (clf, flow) = toy_models(3, 2, 6);
    let mode = CfMode::GroupWise {
        k_max: 3,
        auto_group_count: true,
    };
    let problem = toy_problem(&clf, &flow, 10, mode, 6);
    let a = optimize(&problem).unwrap();
    assert_identical(&a, &optimize(&problem).unwrap());
    let mut other = problem.clone();
    other.hyper.seed = 1;
    assert!(!same_bits(&a.shifts, &optimize(&other).unwrap().shifts));
}

#[test]
fn solution_satisfies_its_own_invariants() {
    let (clf, flow) = toy_models(3, 2, 7);
    let mode = CfMode::GroupWise {
        k_max: 3,
        auto_group_count: true,
    };
    let problem = toy_problem(&clf, &flow, 12, mode, 7);
    let s = optimize(&problem).unwrap();
    assert!(s.magnitudes.iter().all(|&k| k > 0.0));
    assert_eq!(
        s.active_groups,
        s.groups.iter().collect::<std::collections::BTreeSet<_>>().len()
    );
    assert!(s.hard_soft_gap().is_finite());
    // X′ = X₀ + K S D with S the hardened assignment
    for i in 0..s.num_instances() {
        for j in 0..3 {
            let expected = s.x0.get(i, j) + s.magnitudes[i] * s.shifts.get(s.groups[i], j);
            assert!((s.counterfactuals.get(i, j) - expected).abs() < 1e-12);
        }
    }
    let groups = extract_groups(&s);
    assert_eq!(groups.len(), s.active_groups);
    assert_eq!(groups.iter().map(|g| g.members.len()).sum::<usize>(), s.num_instances());
    assert!(groups.windows(2).all(|w| w[0].members.len() >= w[1].members.len()));
    let mut seen: Vec<usize> = groups.iter().flat_map(|g| g.members.clone()).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..s.num_instances()).collect::<Vec<_>>());
}

#[test]
fn extract_groups_follows_hand_built_assignment() {
    let (clf, flow) = toy_models(2, 2, 8);
    let mode = CfMode::GroupWise {
        k_max: 3,
        auto_group_count: true,
    };
    let problem = toy_problem(&clf, &flow, 5, mode, 8);
    let mut s = optimize(&problem).unwrap();
    s.groups = vec![2, 0, 2, 2, 0];
    s.x0 = Tensor::zeros(&[5, 2]);
    s.counterfactuals = Tensor::matrix(5, 2, vec![1.0, 2.0, -1.0, 0.0, 3.0, 2.0, 2.0, 2.0, -3.0, 0.0]).unwrap();
    s.magnitudes = vec![1.0, 2.0, 3.0, 4.0, 5.0];
    let groups = extract_groups(&s);
    assert_eq!(groups.len(), 2);
    assert_eq!((groups[0].id, groups[0].members.clone()), (2, vec![0, 2, 3]));
    assert_eq!((groups[1].id, groups[1].members.clone()), (0, vec![1, 4]));
    assert_eq!(groups[0].mean_shift, vec![2.0, 2.0]);
    assert_eq!(groups[0].normalized_shift, vec![1.0, 1.0]);
    assert_eq!(groups[1].mean_shift, vec![-2.0, 0.0]);
    assert_eq!(groups[1].normalized_shift, vec![-2.0, 0.0]);
    assert_eq!(groups[0].mean_magnitude, 8.0 / 3.0);
}

#[test]
fn divergence_reports_iteration_and_last_finite_loss() {
    let (clf, flow) = toy_models(3, 2, 9);
    let mut problem = toy_problem(&clf, &flow, 4, CfMode::Local, 9);
    problem.hyper.learning_rate = 1e300;
    match optimize(&problem) {
        Err(EngineError::Divergence {
            iteration,
            last_finite_loss,
        }) => {
            assert!(iteration >= 1);
            assert!(last_finite_loss.is_finite());
        }
        other => panic!("expected divergence, got {:?}", other.map(|s| s.iterations)),
    }
}

#[test]
fn invalid_problems_are_rejected() {
    let (clf, flow) = toy_models(3, 2, 10);
    let mut problem = toy_problem(&clf, &flow, 4, CfMode::Local, 10);
    problem.target = 5;
    assert!(matches!(optimize(&problem), Err(EngineError::Config(_))));
    let mode = CfMode::GroupWise {
        k_max: 9,
        auto_group_count: true,
    };
    assert!(matches!(
        optimize(&toy_problem(&clf, &flow, 4, mode, 10)),
        Err(EngineError::Config(_))
    ));
    let mut problem = toy_problem(&clf, &flow, 4, CfMode::Local, 10);
    problem.hyper.margin = 1.5;
    assert!(matches!(optimize(&problem), Err(EngineError::Config(_))));
    let mut problem = toy_problem(&clf, &flow, 4, CfMode::Local, 10);
    problem.constraints = Constraints::free(2);
    assert!(matches!(optimize(&problem), Err(EngineError::Shape(_))));
}

#[test]
fn selection_skips_target_rows_and_out_of_range_rows() {
    let clf = Classifier::logistic_zeros(2, 2);
    let mut clf = clf;
    // class 1 whenever the first feature is positive
    clf.layers[0].weight = Tensor::matrix(2, 2, vec![-1.0, 1.0, 0.0, 0.0]).unwrap();
    let x0 = Tensor::matrix(4, 2, vec![-1.0, 0.0, 1.0, 0.0, -2.0, 5.0, -0.5, -0.5]).unwrap();
    let sel = select_instances(&clf, &x0, 1, &[-10.0, -1.0], &[10.0, 1.0]).unwrap();
    assert_eq!(sel.kept, vec![0, 3]);
    assert_eq!(
        sel.skipped,
        vec![
            (1, SkipReason::AlreadyTarget),
            (2, SkipReason::OutsideRange { feature: 1 })
        ]
    );
}

mod constraint_audit {
    use super::*;
    use proptest::prelude::*;

    fn action_strategy() -> impl Strategy<Value = FeatureAction> {
        prop_oneof![
            Just(FeatureAction::Free),
            Just(FeatureAction::Frozen),
            Just(FeatureAction::IncreaseOnly),
            Just(FeatureAction::DecreaseOnly),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn counterfactuals_respect_constraints(
            actions in proptest::collection::vec(action_strategy(), 4),
            width in proptest::collection::vec(0.2f64..2.0, 4),
            mode_pick in 0usize..3,
            seed in 0u64..1000,
        ) {
            let (clf, flow) = toy_models(4, 2, seed);
            let mode = [
                CfMode::Local,
                CfMode::Global { use_magnitude: true },
                CfMode::GroupWise { k_max: 2, auto_group_count: true },
            ][mode_pick];
            let mut problem = toy_problem(&clf, &flow, 6, mode, seed);
            // ranges straddle every factual value
            let features: Vec<FeatureConstraint> = (0..4)
                .map(|j| {
                    let col: Vec<f64> = (0..6).map(|i| problem.x0.get(i, j)).collect();
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min) - 0.1;
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max) + width[j];
                    FeatureConstraint { action: actions[j], lo, hi }
                })
                .collect();
            problem.lower = features.iter().map(|f| f.lo).collect();
            problem.upper = features.iter().map(|f| f.hi).collect();
            problem.constraints = Constraints::new(features).unwrap();
            let s = optimize(&problem).unwrap();
            for i in 0..6 {
                for j in 0..4 {
                    let (x, x0) = (s.counterfactuals.get(i, j), problem.x0.get(i, j));
                    prop_assert!(x >= problem.lower[j] && x <= problem.upper[j]);
                    match problem.constraints.action(j) {
                        FeatureAction::Frozen => prop_assert_eq!(x.to_bits(), x0.to_bits()),
                        FeatureAction::IncreaseOnly => prop_assert!(x >= x0),
                        FeatureAction::DecreaseOnly => prop_assert!(x <= x0),
                        FeatureAction::Free => {}
                    }
                }
            }
        }
    }
}
