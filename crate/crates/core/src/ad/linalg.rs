//! Small dense kernels used by the log-determinant primitive.

use super::AdError;

/// Lower-triangular Cholesky factor of a symmetric positive-definite `n×n`
/// matrix. Only the lower triangle of `m` is read.
pub fn cholesky(m: &[f64], n: usize) -> Result<Vec<f64>, AdError> {
    assert_eq!(m.len(), n * n);
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut diag = m[j * n + j];
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if !diag.is_finite() || diag <= 0.0 {
            return Err(AdError::Decomposition(format!(
                "matrix is not positive definite (pivot {j} = {diag:e})"
            )));
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let mut s = m[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Ok(l)
}

/// `log det M = 2 Σ log L_ii` from a Cholesky factor.
pub fn logdet_from_cholesky(l: &[f64], n: usize) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0
}

/// `M⁻¹ = L⁻ᵀ L⁻¹`, returned as a full symmetric matrix.
pub fn inverse_from_cholesky(l: &[f64], n: usize) -> Vec<f64> {
    // invert L column by column by forward substitution
    let mut linv = vec![0.0; n * n];
    for c in 0..n {
        for i in c..n {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for k in c..i {
                s -= l[i * n + k] * linv[k * n + c];
            }
            linv[i * n + c] = s / l[i * n + i];
        }
    }
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in i..n {
                s += linv[k * n + i] * linv[k * n + j];
            }
            inv[i * n + j] = s;
            inv[j * n + i] = s;
        }
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_and_inverse_of_small_spd() {
        // M = [[4, 2], [2, 3]], det = 8
        let m = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&m, 2).unwrap();
        assert!((logdet_from_cholesky(&l, 2) - 8f64.ln()).abs() < 1e-14);
        let inv = inverse_from_cholesky(&l, 2);
        let expected = [3.0 / 8.0, -2.0 / 8.0, -2.0 / 8.0, 4.0 / 8.0];
        for (a, b) in inv.iter().zip(expected) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn indefinite_is_rejected() {
        let m = [1.0, 2.0, 2.0, 1.0];
        assert!(matches!(cholesky(&m, 2), Err(AdError::Decomposition(_))));
    }
}
