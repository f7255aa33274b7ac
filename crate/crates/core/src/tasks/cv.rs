//! Approximate cross-validation: held-out loss at the removal estimate
//! instead of a retrained model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::sample_folds;
use crate::error::Result;
use crate::expfamily::sample_loss;
use crate::influence::Estimator;
use crate::objective::WeightVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcvEstimate {
    pub mean: f64,
    pub per_fold: Vec<f64>,
    pub folds: Vec<Vec<usize>>,
}

/// Default held-out size: 20% of the training set.
pub fn default_k(n: usize) -> usize {
    ((n as f64 * 0.2).round() as usize).clamp(1, n.saturating_sub(1).max(1))
}

/// Leave-`k`-out ACV over `folds` seeded folds, plug-in estimator.
pub fn acv(est: &Estimator<'_>, k: usize, folds: usize, seed: u64) -> Result<AcvEstimate> {
    let data = est.data();
    let fold_sets = sample_folds(data.len(), k, folds, seed)?;
    est.prepare()?;
    let per_fold: Vec<f64> = fold_sets
        .par_iter()
        .map(|fold| {
            let theta = est.estimate(&WeightVector::leave_k_out(data.len(), fold)?)?;
            held_out(est, fold, &theta)
        })
        .collect::<Result<_>>()?;
    Ok(AcvEstimate {
        mean: per_fold.iter().sum::<f64>() / per_fold.len() as f64,
        per_fold,
        folds: fold_sets,
    })
}

fn held_out(est: &Estimator<'_>, fold: &[usize], theta: &[f64]) -> Result<f64> {
    let head = est.head();
    let mut total = 0.0;
    for &i in fold {
        total += sample_loss(est.model(), &head, &est.data().samples[i], theta)?;
    }
    Ok(total / fold.len() as f64)
}

/// The same folds evaluated at `θ̂` itself (zero update), for reference.
pub fn held_out_at_fit(est: &Estimator<'_>, k: usize, folds: usize, seed: u64) -> Result<AcvEstimate> {
    let fold_sets = sample_folds(est.data().len(), k, folds, seed)?;
    let per_fold: Vec<f64> = fold_sets
        .iter()
        .map(|fold| held_out(est, fold, est.theta_hat()))
        .collect::<Result<_>>()?;
    Ok(AcvEstimate {
        mean: per_fold.iter().sum::<f64>() / per_fold.len() as f64,
        per_fold,
        folds: fold_sets,
    })
}
