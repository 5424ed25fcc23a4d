mod common;

use cfx_core::ad::sparsemax;
use common::simplex_projection_by_enumeration;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn matches_support_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..1000 {
        let k = rng.random_range(1..=6);
        let z: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p = sparsemax(&z);
        let q = simplex_projection_by_enumeration(&z);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-8, "z = {z:?}: {p:?} vs {q:?}");
        }
    }
}

proptest! {
    #[test]
    fn output_is_on_the_simplex(z in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = sparsemax(&z);
        let s: f64 = p.iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn shift_invariant(z in prop::collection::vec(-5.0f64..5.0, 1..8), c in -10.0f64..10.0) {
        let p = sparsemax(&z);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let q = sparsemax(&shifted);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
