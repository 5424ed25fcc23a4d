//! Euclidean projection onto the probability simplex.

/// Projects `z` onto `{p : Σp = 1, p ≥ 0}`.
///
/// Sorting is stable on the original index, and the support condition
/// `1 + j·z₍ⱼ₎ > Σ_{i≤j} z₍ᵢ₎` is strict.
pub fn sparsemax(z: &[f64]) -> Vec<f64> {
    if z.len() == 1 {
        return vec![1.0];
    }
    let tau = sparsemax_threshold(z);
    z.iter().map(|&v| (v - tau).max(0.0)).collect()
}

/// The threshold `τ` such that `sparsemax(z)ᵢ = max(zᵢ − τ, 0)`.
pub fn sparsemax_threshold(z: &[f64]) -> f64 {
    assert!(!z.is_empty(), "sparsemax of an empty row");
    let mut sorted = z.to_vec();
    // stable: equal values keep their original order
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite input"));
    let mut cumsum = 0.0;
    let mut support = 0;
    let mut support_sum = 0.0;
    for (j, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let k = (j + 1) as f64;
        if 1.0 + k * v > cumsum {
            support = j + 1;
            support_sum = cumsum;
        }
    }
    (support_sum - 1.0) / support as f64
}

/// Vector-Jacobian product of sparsemax at output `p`: `s ⊙ (v − mean_S v)`.
pub fn sparsemax_vjp(p: &[f64], v: &[f64]) -> Vec<f64> {
    let (sum, count) = p
        .iter()
        .zip(v)
        .filter(|(p, _)| **p > 0.0)
        .fold((0.0, 0usize), |(s, c), (_, v)| (s + v, c + 1));
    let mean = if count > 0 { sum / count as f64 } else { 0.0 };
    p.iter()
        .zip(v)
        .map(|(&p, &v)| if p > 0.0 { v - mean } else { 0.0 })
        .collect()
}
