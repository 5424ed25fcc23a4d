use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};
use crate::ad::Tensor;

/// Per-feature z-score transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    /// Fits mean and population standard deviation on the rows of `x` where `mask` is set.
    pub fn fit(x: &Tensor, mask: &[bool], names: &[String]) -> Result<Self, DataError> {
        assert_eq!(mask.len(), x.rows());
        let rows: Vec<usize> = (0..x.rows()).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(DataError::InvalidArgument("empty training mask".into()));
        }
        let d = x.cols();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in &rows {
            mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &i in &rows {
            for (j, v) in x.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let std: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
        let degenerate: Vec<String> = std
            .iter()
            .enumerate()
            .filter(|(j, s)| **s <= 1e-12 * mean[*j].abs().max(1.0))
            .map(|(j, _)| names.get(j).cloned().unwrap_or_else(|| format!("#{j}")))
            .collect();
        if !degenerate.is_empty() {
            return Err(DataError::ZeroVariance(degenerate));
        }
        Ok(Self { mean, std })
    }

    pub fn transform(&self, x: &Tensor) -> Tensor {
        self.apply(x, |v, m, s| (v - m) / s)
    }

    pub fn inverse_transform(&self, z: &Tensor) -> Tensor {
        self.apply(z, |v, m, s| v * s + m)
    }

    /// Maps an original-unit value of feature `j` into standardized space.
    pub fn to_standard(&self, j: usize, v: f64) -> f64 {
        (v - self.mean[j]) / self.std[j]
    }

    pub fn to_original(&self, j: usize, z: f64) -> f64 {
        z * self.std[j] + self.mean[j]
    }

    /// Log-Jacobian of the transform, `−Σ ln σ_j`: adding it to a log density in
    /// standardized space gives the density in original units.
    pub fn log_density_offset(&self) -> f64 {
        -self.std.iter().map(|s| s.ln()).sum::<f64>()
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let d = self.mean.len();
        assert_eq!(x.cols(), d, "scaler fitted on {d} features");
        x.map_indexed(|i, v| f(v, self.mean[i % d], self.std[i % d]))
    }
}

/// Fits a [`Scaler`] on the masked training rows and applies it to every row.
pub fn standardize(dataset: &Dataset, train_mask: &[bool]) -> Result<(Tensor, Scaler), DataError> {
    let scaler = Scaler::fit(&dataset.x, train_mask, &dataset.feature_names)?;
    Ok((scaler.transform(&dataset.x), scaler))
}
