//! Data attribution: predicted change of a test loss when a training point
//! is removed, `⟨∇ℓ_test, θ̃(1^{n∖i}) − θ̂⟩ = (1/n) ∇ℓ_testᵀ A⁻¹ ∇ℓ_i`.
//!
//! Positive scores mean the test loss would go up without the point.

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::expfamily::loss_grad;
use crate::influence::Estimator;
use crate::linalg::dot;
use crate::objective::WeightVector;

/// Scores for every index in `indices`, sharing one inverse product.
pub fn attribution_scores(est: &Estimator<'_>, test: &Sample, indices: &[usize]) -> Result<Vec<f64>> {
    let g = loss_grad(est.model(), &est.head(), test, est.theta_hat())?;
    est.removal_effects(&g, indices)
}

/// Score for one index from its own displacement `−A⁻¹ b_i`.
pub fn attribution_score(est: &Estimator<'_>, test: &Sample, i: usize) -> Result<f64> {
    let g = loss_grad(est.model(), &est.head(), test, est.theta_hat())?;
    let b = est.b_vector(&WeightVector::leave_one_out(est.data().len(), i)?)?;
    let step = est.solve_linear(&b)?;
    Ok(-dot(&g, &step))
}

/// Average ranks (ties share the mean rank), 1-based.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidInput("spearman needs two equal-length series of length ≥ 2".into()));
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }
}
