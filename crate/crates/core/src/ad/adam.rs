use serde::{Deserialize, Serialize};

use super::Tensor;

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First and second moment estimates for a list of parameter tensors.
#[derive(Clone, Debug)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Forgets the moments of elements `range` of parameter `param`.
    pub fn reset(&mut self, param: usize, range: std::ops::Range<usize>) {
        self.m[param][range.clone()].fill(0.0);
        self.v[param][range].fill(0.0);
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        assert_eq!(p.shape(), g.shape(), "parameter/gradient shape mismatch");
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, (pi, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *pi -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::vector(vec![1.0, -2.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        let mut st = AdamState::new(&[&p]);
        for _ in 0..10 {
            adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default());
        }
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::vector(vec![0.0]).unwrap();
        let g = Tensor::vector(vec![1.0]).unwrap();
        let mut st = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::with_lr(0.01));
        // m̂ = 1, v̂ = 1 → Δ = −0.01 / (1 + 1e-8)
        assert!((p.data()[0] + 0.01 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let mut p = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let g = Tensor::vector(vec![3.0, -0.5]).unwrap();
        let mut st = AdamState::new(&[&p]);
        for _ in 0..50 {
            adam_step(&mut [&mut p], &[&g], &mut st, &AdamConfig::default());
        }
        assert!(p.data()[0] < 0.0 && p.data()[1] > 0.0);
    }
}
