use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DataError, Dataset};
use crate::ad::Tensor;

/// Two interleaving half circles: the upper arc `(cos t, sin t)` is class 0,
/// the lower arc `(1 − cos t, 0.5 − sin t)` is class 1, with `t` evenly
/// spaced on `[0, π]`. Rows are shuffled, then isotropic Gaussian noise with
/// standard deviation `noise_std` is added.
pub fn make_moons(n: usize, noise_std: f64, seed: u64) -> Result<Dataset, DataError> {
    if n < 2 {
        return Err(DataError::InvalidArgument("make_moons needs n >= 2".into()));
    }
    if noise_std.is_nan() || noise_std < 0.0 {
        return Err(DataError::InvalidArgument("noise_std must be nonnegative".into()));
    }
    let n_upper = n / 2;
    let n_lower = n - n_upper;
    let arc = |count: usize, i: usize| {
        if count == 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (count - 1) as f64
        }
    };
    let mut rows: Vec<([f64; 2], usize)> = Vec::with_capacity(n);
    for i in 0..n_upper {
        let t = arc(n_upper, i);
        rows.push(([t.cos(), t.sin()], 0));
    }
    for i in 0..n_lower {
        let t = arc(n_lower, i);
        rows.push(([1.0 - t.cos(), 0.5 - t.sin()], 1));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rows.shuffle(&mut rng);
    let mut x = Vec::with_capacity(2 * n);
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).expect("valid std");
        for (p, _) in &rows {
            x.push(p[0] + normal.sample(&mut rng));
            x.push(p[1] + normal.sample(&mut rng));
        }
    } else {
        rows.iter().for_each(|(p, _)| x.extend_from_slice(p));
    }
    Ok(Dataset {
        name: "moons".into(),
        x: Tensor::matrix(n, 2, x).map_err(|e| DataError::InvalidArgument(e.to_string()))?,
        y: rows.iter().map(|(_, c)| *c).collect(),
        feature_names: vec!["x0".into(), "x1".into()],
        class_labels: vec!["0".into(), "1".into()],
    })
}

/// Isotropic two-dimensional Gaussian clusters of equal variance. Centers are
/// drawn uniformly from `[-10, 10]²`; class sizes differ by at most one.
pub fn make_blobs(n: usize, centers: usize, cluster_std: f64, seed: u64) -> Result<Dataset, DataError> {
    if centers < 2 {
        return Err(DataError::InvalidArgument("make_blobs needs at least 2 centers".into()));
    }
    if n < centers {
        return Err(DataError::InvalidArgument("fewer samples than centers".into()));
    }
    if cluster_std.is_nan() || cluster_std < 0.0 {
        return Err(DataError::InvalidArgument("cluster_std must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mids: Vec<[f64; 2]> = (0..centers)
        .map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)])
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % centers).collect();
    labels.shuffle(&mut rng);
    let mut x = Vec::with_capacity(2 * n);
    for &c in &labels {
        for m in mids[c] {
            let noise = if cluster_std > 0.0 {
                Normal::new(0.0, cluster_std).expect("valid std").sample(&mut rng)
            } else {
                0.0
            };
            x.push(m + noise);
        }
    }
    Ok(Dataset {
        name: "blobs".into(),
        x: Tensor::matrix(n, 2, x).map_err(|e| DataError::InvalidArgument(e.to_string()))?,
        y: labels,
        feature_names: vec!["x0".into(), "x1".into()],
        class_labels: (0..centers).map(|c| c.to_string()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_moons_lie_on_arcs() {
        let ds = make_moons(100, 0.0, 3).unwrap();
        for i in 0..ds.len() {
            let (a, b) = (ds.x.get(i, 0), ds.x.get(i, 1));
            let r = match ds.y[i] {
                0 => (a * a + b * b).sqrt(),
                _ => ((1.0 - a).powi(2) + (0.5 - b).powi(2)).sqrt(),
            };
            assert!((r - 1.0).abs() < 1e-12);
            let upper = ds.y[i] == 0;
            assert!(if upper { b >= -1e-12 } else { b <= 0.5 + 1e-12 });
        }
    }

    #[test]
    fn moons_are_balanced_and_deterministic() {
        let a = make_moons(1024, 0.01, 9).unwrap();
        assert_eq!(a.class_counts(), vec![512, 512]);
        assert_eq!(a, make_moons(1024, 0.01, 9).unwrap());
        assert_ne!(a.x, make_moons(1024, 0.01, 10).unwrap().x);
    }

    #[test]
    fn zero_std_blobs_sit_on_centers() {
        let ds = make_blobs(30, 3, 0.0, 1).unwrap();
        for c in 0..3 {
            let rows: Vec<usize> = (0..30).filter(|&i| ds.y[i] == c).collect();
            let first = ds.x.row(rows[0]).to_vec();
            assert!(rows.iter().all(|&i| ds.x.row(i) == first.as_slice()));
        }
    }

    #[test]
    fn blobs_shape_and_determinism() {
        let ds = make_blobs(1500, 3, 1.0, 0).unwrap();
        assert_eq!((ds.len(), ds.num_features(), ds.num_classes()), (1500, 2, 3));
        assert_eq!(ds.class_counts(), vec![500, 500, 500]);
        assert_eq!(ds, make_blobs(1500, 3, 1.0, 0).unwrap());
    }
}
