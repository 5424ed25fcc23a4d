use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classifier::one_hot;
use super::dense::{self, Dense};
use super::train::{fit, holdout_split, Trainable, Trained};
use super::{ModelError, TrainConfig};
use crate::ad::{AdError, Tape, Tensor, Var};
use crate::data::Samples;

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Number of affine coupling layers.
    pub layers: usize,
    /// Width of the two hidden layers of each conditioner.
    pub hidden: usize,
    /// Log-scales are bounded to `(-scale_bound, scale_bound)` via `tanh`.
    pub scale_bound: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: 6,
            hidden: 128,
            scale_bound: 3.0,
        }
    }
}

/// Class-conditional RealNVP density `log p(x | y)` with a standard normal base.
///
/// Layer `l` leaves the dimensions with `(j + l)` even untouched and applies an
/// affine map to the rest, conditioned on the untouched part and on the one-hot
/// class. The last conditioner layer starts at zero so a fresh flow is the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalFlow {
    pub config: FlowConfig,
    pub num_features: usize,
    pub num_classes: usize,
    /// Conditioner networks, one per coupling layer.
    pub couplings: Vec<Vec<Dense>>,
}

impl ConditionalFlow {
    pub fn identity(num_features: usize, num_classes: usize, config: FlowConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = num_features;
        let h = config.hidden;
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let couplings = (0..config.layers)
            .map(|_| {
                vec![
                    Dense::random(d + num_classes, h, he(d + num_classes), &mut rng),
                    Dense::random(h, h, he(h), &mut rng),
                    Dense::zeros(h, 2 * d),
                ]
            })
            .collect();
        Self {
            config,
            num_features,
            num_classes,
            couplings,
        }
    }

    fn mask(&self, layer: usize) -> Vec<f64> {
        (0..self.num_features)
            .map(|j| if (j + layer).is_multiple_of(2) { 1.0 } else { 0.0 })
            .collect()
    }

    fn check(&self, cols: usize, y: &[usize]) -> Result<(), ModelError> {
        if cols != self.num_features {
            return Err(ModelError::FeatureMismatch {
                expected: self.num_features,
                got: cols,
            });
        }
        if let Some(&c) = y.iter().find(|&&c| c >= self.num_classes) {
            return Err(ModelError::ClassOutOfRange {
                class: c,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }

    /// Log-scale and shift of coupling `layer` for the input `x`.
    fn scale_shift<'t>(
        &self,
        layer: usize,
        x: Var<'t>,
        cond: Var<'t>,
        params: &[Var<'t>],
    ) -> Result<(Var<'t>, Var<'t>), AdError> {
        let tape = x.tape();
        let d = self.num_features;
        let mask = tape.constant(Tensor::vector(self.mask(layer))?);
        let free = tape.constant(Tensor::vector(self.mask(layer).iter().map(|m| 1.0 - m).collect())?);
        let input = x.mul(&mask)?.concat_cols(&cond)?;
        let out = dense::mlp(input, params)?;
        let cols: Vec<usize> = (0..d).collect();
        let s = out
            .select_cols(&cols)?
            .tanh()?
            .scale(self.config.scale_bound)?
            .mul(&free)?;
        let shift_cols: Vec<usize> = (d..2 * d).collect();
        let t = out.select_cols(&shift_cols)?.mul(&free)?;
        Ok((s, t))
    }

    /// Per-row log density with flow tensors bound as `params` (three layers per coupling).
    fn log_density_with<'t>(&self, x: Var<'t>, y: &[usize], params: &[Var<'t>]) -> Result<Var<'t>, AdError> {
        let tape = x.tape();
        let cond = tape.constant(one_hot(y, self.num_classes));
        let mut z = x;
        let mut log_det: Option<Var<'t>> = None;
        for layer in (0..self.couplings.len()).rev() {
            let (s, t) = self.scale_shift(layer, z, cond, &params[layer * 6..layer * 6 + 6])?;
            z = z.sub(&t)?.mul(&s.neg()?.exp()?)?;
            let term = s.sum(Some(1))?;
            log_det = Some(match log_det {
                None => term,
                Some(acc) => acc.add(&term)?,
            });
        }
        let d = self.num_features as f64;
        let base = z.square()?.sum(Some(1))?.scale(-0.5)?.add_scalar(-0.5 * d * LOG_2PI)?;
        match log_det {
            None => Ok(base),
            Some(ld) => base.sub(&ld),
        }
    }

    /// `log p(x_i | y_i)` per row, differentiable with respect to `x`.
    pub fn log_density_var<'t>(&self, x: Var<'t>, y: &[usize]) -> Result<Var<'t>, ModelError> {
        let shape = x.shape();
        self.check(shape.last().copied().unwrap_or(0), y)?;
        if shape.len() != 2 || shape[0] != y.len() {
            return Err(ModelError::Ad(AdError::Shape(format!(
                "log density of {shape:?} with {} labels",
                y.len()
            ))));
        }
        let params = bind_all(x.tape(), &self.couplings, false);
        Ok(self.log_density_with(x, y, &params)?)
    }

    pub fn log_density(&self, x: &Tensor, y: &[usize]) -> Result<Vec<f64>, ModelError> {
        let tape = Tape::new();
        Ok(self.log_density_var(tape.constant(x.clone()), y)?.value().into_data())
    }

    /// Maps data to the base space.
    pub fn inverse(&self, x: &Tensor, y: &[usize]) -> Result<Tensor, ModelError> {
        self.check(x.cols(), y)?;
        let tape = Tape::new();
        let params = bind_all(&tape, &self.couplings, false);
        let cond = tape.constant(one_hot(y, self.num_classes));
        let mut z = tape.constant(x.clone());
        for layer in (0..self.couplings.len()).rev() {
            let (s, t) = self.scale_shift(layer, z, cond, &params[layer * 6..layer * 6 + 6])?;
            z = z.sub(&t)?.mul(&s.neg()?.exp()?)?;
        }
        Ok(z.value())
    }

    /// Maps base-space points to data space.
    pub fn forward(&self, z: &Tensor, y: &[usize]) -> Result<Tensor, ModelError> {
        Ok(self.forward_with_log_det(z, y)?.0)
    }

    /// Maps base-space points to data space and returns the per-row
    /// log-determinant of the Jacobian accumulated along the way.
    pub fn forward_with_log_det(&self, z: &Tensor, y: &[usize]) -> Result<(Tensor, Vec<f64>), ModelError> {
        self.check(z.cols(), y)?;
        let tape = Tape::new();
        let params = bind_all(&tape, &self.couplings, false);
        let cond = tape.constant(one_hot(y, self.num_classes));
        let mut x = tape.constant(z.clone());
        let mut log_det = vec![0.0; z.rows()];
        for layer in 0..self.couplings.len() {
            let (s, t) = self.scale_shift(layer, x, cond, &params[layer * 6..layer * 6 + 6])?;
            x = x.mul(&s.exp()?)?.add(&t)?;
            for (acc, v) in log_det.iter_mut().zip(s.sum(Some(1))?.value().data()) {
                *acc += v;
            }
        }
        Ok((x.value(), log_det))
    }
}

fn bind_all<'t>(tape: &'t Tape, couplings: &[Vec<Dense>], trainable: bool) -> Vec<Var<'t>> {
    couplings
        .iter()
        .flat_map(|net| dense::bind(tape, net, trainable))
        .collect()
}

impl Trainable for ConditionalFlow {
    fn params(&self) -> Vec<&Tensor> {
        self.couplings.iter().flat_map(|net| dense::tensors(net)).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.couplings
            .iter_mut()
            .flat_map(|net| dense::tensors_mut(net))
            .collect()
    }

    /// Mean negative log-likelihood.
    fn batch_loss<'t>(&self, tape: &'t Tape, params: &[Var<'t>], x: &Tensor, y: &[usize]) -> Result<Var<'t>, AdError> {
        self.log_density_with(tape.constant(x.clone()), y, params)?
            .mean(None)?
            .neg()
    }
}

/// Fits the flow by maximum likelihood on labelled rows. The report's scores
/// are mean log densities on the fitting rows and on the holdout.
pub fn train_flow(
    data: &Samples,
    config: FlowConfig,
    cfg: &TrainConfig,
) -> Result<Trained<ConditionalFlow>, ModelError> {
    if data.is_empty() {
        return Err(ModelError::Empty);
    }
    if config.layers == 0 || config.hidden == 0 || config.scale_bound.is_nan() || config.scale_bound <= 0.0 {
        return Err(ModelError::Config(format!("{config:?}")));
    }
    let d = data.x.cols();
    for j in 0..d {
        let first = data.x.get(0, j);
        if (0..data.len()).all(|i| data.x.get(i, j) == first) {
            return Err(ModelError::DegenerateFeature(j));
        }
    }
    let mut model = ConditionalFlow::identity(d, data.num_classes, config, cfg.seed);
    model.check(d, &data.y)?;
    let mut report = fit(&mut model, data, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train, val) = holdout_split(data, cfg.holdout_fraction, &mut rng);
    let mean = |s: &Samples| -> Result<f64, ModelError> {
        let ld = model.log_density(&s.x, &s.y)?;
        Ok(ld.iter().sum::<f64>() / ld.len() as f64)
    };
    report.train_score = mean(&train)?;
    report.validation_score = if val.is_empty() {
        report.train_score
    } else {
        mean(&val)?
    };
    Ok(Trained { model, report })
}

/// Quantile with linear interpolation between order statistics.
pub fn linear_quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
}

/// First quartile of `log p(x | class)` over the rows of `data` labelled `class`.
pub fn density_threshold(flow: &ConditionalFlow, data: &Samples, class: usize) -> Result<f64, ModelError> {
    let rows = data.of_class(class);
    if rows.is_empty() {
        return Err(ModelError::ClassAbsent(class));
    }
    let ld = flow.log_density(&rows.x, &rows.y)?;
    Ok(linear_quantile(&ld, 0.25).expect("nonempty"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn perturbed(seed: u64) -> ConditionalFlow {
        let mut flow = ConditionalFlow::identity(
            3,
            2,
            FlowConfig {
                hidden: 8,
                ..FlowConfig::default()
            },
            seed,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for net in &mut flow.couplings {
            net[2] = Dense::random(8, 6, 0.3, &mut rng);
        }
        flow
    }

    #[test]
    fn identity_flow_at_origin() {
        let flow = ConditionalFlow::identity(2, 2, FlowConfig::default(), 0);
        let x = Tensor::zeros(&[1, 2]);
        let ld = flow.log_density(&x, &[1]).unwrap();
        assert!((ld[0] + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn round_trip() {
        let flow = perturbed(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[20, 3], 1.5, &mut rng);
        let y: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let back = flow.forward(&flow.inverse(&x, &y).unwrap(), &y).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-8);
    }

    #[test]
    fn change_of_variables() {
        let flow = perturbed(5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let z = Tensor::randn(&[30, 3], 1.0, &mut rng);
        let y: Vec<usize> = (0..30).map(|i| (i / 3) % 2).collect();
        let (x, log_det) = flow.forward_with_log_det(&z, &y).unwrap();
        let ld = flow.log_density(&x, &y).unwrap();
        for i in 0..30 {
            let base: f64 = z.row(i).iter().map(|v| -0.5 * v * v).sum::<f64>() - 1.5 * LOG_2PI;
            assert!((ld[i] - (base - log_det[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn quartile_interpolates() {
        assert_eq!(linear_quantile(&[3.0, 0.0, 2.0, 1.0], 0.25), Some(0.75));
        assert_eq!(linear_quantile(&[4.2; 5], 0.25), Some(4.2));
        assert_eq!(linear_quantile(&[], 0.25), None);
    }

    #[test]
    fn constant_feature_is_rejected() {
        let data = Samples {
            x: Tensor::matrix(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap(),
            y: vec![0, 1, 0],
            num_classes: 2,
        };
        let err = train_flow(&data, FlowConfig::default(), &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, ModelError::DegenerateFeature(1)));
    }
}
