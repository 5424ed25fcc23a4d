use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ad::{AdError, Tape, Tensor, Var};

/// Affine layer `x·W + b` with `W: in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    /// Gaussian weights with the given standard deviation, zero bias.
    pub fn random<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Tensor::randn(&[fan_in, fan_out], std, rng),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

/// Binds every tensor of `layers` to `tape`, as parameters or constants.
pub(crate) fn bind<'t>(tape: &'t Tape, layers: &[Dense], trainable: bool) -> Vec<Var<'t>> {
    layers
        .iter()
        .flat_map(|l| [&l.weight, &l.bias])
        .map(|t| tape.leaf(t.clone(), trainable))
        .collect()
}

/// Runs a ReLU network whose layer tensors are bound as `params` (weight, bias pairs).
/// No activation follows the last layer.
pub(crate) fn mlp<'t>(x: Var<'t>, params: &[Var<'t>]) -> Result<Var<'t>, AdError> {
    let mut h = x;
    let n = params.len() / 2;
    for (k, pair) in params.chunks(2).enumerate() {
        h = h.matmul(&pair[0])?.add(&pair[1])?;
        if k + 1 < n {
            h = h.relu()?;
        }
    }
    Ok(h)
}

pub(crate) fn tensors(layers: &[Dense]) -> Vec<&Tensor> {
    layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
}

pub(crate) fn tensors_mut(layers: &mut [Dense]) -> Vec<&mut Tensor> {
    layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
}
