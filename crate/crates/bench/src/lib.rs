//! Inputs shared by the benchmarks.

use cfx_core::ad::Tensor;
use cfx_core::models::{Classifier, ClassifierKind, ConditionalFlow, FlowConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Untrained models of the default architecture; cost does not depend on the weights.
pub fn models(num_features: usize, num_classes: usize) -> (Classifier, ConditionalFlow) {
    let clf = Classifier::init(ClassifierKind::Mlp, num_features, num_classes, 0);
    let flow = ConditionalFlow::identity(num_features, num_classes, FlowConfig::default(), 0);
    (clf, flow)
}

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor {
    Tensor::randn(&[rows, cols], 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}
