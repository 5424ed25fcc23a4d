use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};

/// Assignment of every row to one of `k` folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Folds {
    k: usize,
    assignment: Vec<usize>,
}

impl Folds {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn members(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        self.assignment.iter().for_each(|&f| s[f] += 1);
        s
    }
}

/// Stratified partition into `k` folds. Within each class the rows are
/// shuffled and dealt round-robin; the dealing position carries over between
/// classes so fold sizes differ by at most one.
pub fn split_folds(dataset: &Dataset, k: usize, seed: u64) -> Result<Folds, DataError> {
    if k < 2 {
        return Err(DataError::InvalidArgument("need at least 2 folds".into()));
    }
    if dataset.len() < k {
        return Err(DataError::InvalidArgument(format!(
            "{} rows cannot fill {k} folds",
            dataset.len()
        )));
    }
    let counts = dataset.class_counts();
    if let Some((class, &count)) = counts.iter().enumerate().find(|(_, &c)| c > 0 && c < k) {
        return Err(DataError::ClassTooSmall { class, count, folds: k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; dataset.len()];
    let mut next = 0;
    for class in 0..dataset.num_classes() {
        let mut members: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.y[i] == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = next % k;
            next += 1;
        }
    }
    Ok(Folds { k, assignment })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ad::Tensor;

    fn toy(labels: Vec<usize>, classes: usize) -> Dataset {
        let n = labels.len();
        Dataset {
            name: "toy".into(),
            x: Tensor::matrix(n, 1, (0..n).map(|i| i as f64).collect()).unwrap(),
            y: labels,
            feature_names: vec!["f".into()],
            class_labels: (0..classes).map(|c| c.to_string()).collect(),
        }
    }

    #[test]
    fn ten_rows_five_folds() {
        let ds = toy((0..10).map(|i| i % 2).collect(), 2);
        let folds = split_folds(&ds, 5, 1).unwrap();
        assert_eq!(folds.sizes(), vec![2; 5]);
    }

    #[test]
    fn small_class_is_rejected() {
        let ds = toy(vec![0, 0, 0, 0, 0, 0, 1, 1], 2);
        assert!(matches!(
            split_folds(&ds, 5, 0),
            Err(DataError::ClassTooSmall { class: 1, .. })
        ));
    }
}
