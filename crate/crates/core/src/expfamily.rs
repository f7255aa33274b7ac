//! Exponential-family output heads `P(y | f)` with natural parameters `f`.
//!
//! The negative log-likelihood is `A(f) − ⟨f, t(y)⟩` (up to a constant), so
//! the score is `t(y) − E[t]` and the curvature in `f` is `Cov[t]`, which
//! does not depend on `y`.
//!
//! - `Categorical(k)`: `t(y) = e_y`, `E[t] = softmax(f)`.
//! - `Gaussian` (unit variance, one output): reduced form with `t(y) = y`,
//!   `E[t] = f`, loss `½(y − f)²`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{check_len, Error, Result};
use crate::linalg::norm;
use crate::nn::{Model, OutputLoss};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "head", rename_all = "lowercase")]
pub enum Head {
    Categorical { classes: usize },
    Gaussian,
}

/// Numerically stable softmax.
pub fn softmax(f: &[f64]) -> Vec<f64> {
    let m = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = f.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Numerically stable `log Σ exp f_j`.
pub fn logsumexp(f: &[f64]) -> f64 {
    let m = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + f.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl Head {
    pub fn from_json(s: &str) -> Result<Self> {
        let head: Head = serde_json::from_str(s)?;
        if let Head::Categorical { classes } = head {
            if classes < 2 {
                return Err(Error::InvalidInput(format!(
                    "categorical head needs at least 2 classes, got {classes}"
                )));
            }
        }
        Ok(head)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("head serializes")
    }

    /// Number of natural parameters `k`.
    pub fn dim(&self) -> usize {
        match *self {
            Head::Categorical { classes } => classes,
            Head::Gaussian => 1,
        }
    }

    /// Upper bound on the operator norm of the `f`-Hessian.
    pub fn q(&self) -> f64 {
        1.0
    }

    fn check(&self, f: &[f64], y: f64) -> Result<()> {
        check_len("natural parameters", self.dim(), f.len())?;
        match *self {
            Head::Categorical { classes } => {
                if y.fract() != 0.0 || y < 0.0 || y >= classes as f64 {
                    return Err(Error::InvalidInput(format!(
                        "label {y} is not a class index in 0..{classes}"
                    )));
                }
            }
            Head::Gaussian => {
                if !y.is_finite() {
                    return Err(Error::InvalidInput(format!("label {y} is not finite")));
                }
            }
        }
        Ok(())
    }

    /// Validates that every label of `data` lies in the head's domain.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        let f = vec![0.0; self.dim()];
        data.samples.iter().try_for_each(|s| self.check(&f, s.y))
    }

    /// `−log P(y | f)` without additive constants.
    pub fn nll(&self, f: &[f64], y: f64) -> Result<f64> {
        self.check(f, y)?;
        Ok(match *self {
            Head::Categorical { .. } => logsumexp(f) - f[y as usize],
            Head::Gaussian => 0.5 * (y - f[0]).powi(2),
        })
    }

    /// `E[t(y)]` under `P(· | f)`.
    pub fn mean_statistic(&self, f: &[f64]) -> Vec<f64> {
        match *self {
            Head::Categorical { .. } => softmax(f),
            Head::Gaussian => vec![f[0]],
        }
    }

    /// `∇_f log P(y | f) = t(y) − E[t]`.
    pub fn score_f(&self, f: &[f64], y: f64) -> Result<Vec<f64>> {
        self.check(f, y)?;
        Ok(match *self {
            Head::Categorical { .. } => {
                let mut s: Vec<f64> = softmax(f).into_iter().map(|p| -p).collect();
                s[y as usize] += 1.0;
                s
            }
            Head::Gaussian => vec![y - f[0]],
        })
    }

    /// `−∇²_f log P(y | f)` as a dense `k × k` matrix.
    pub fn f_hessian(&self, f: &[f64]) -> Result<DMatrix<f64>> {
        check_len("natural parameters", self.dim(), f.len())?;
        Ok(match *self {
            Head::Categorical { classes } => {
                let p = softmax(f);
                DMatrix::from_fn(classes, classes, |i, j| {
                    if i == j {
                        p[i] - p[i] * p[j]
                    } else {
                        -p[i] * p[j]
                    }
                })
            }
            Head::Gaussian => DMatrix::from_element(1, 1, 1.0),
        })
    }

    /// `(−∇²_f log P) u` without forming the matrix.
    pub fn f_hessian_apply(&self, f: &[f64], u: &[f64]) -> Vec<f64> {
        match *self {
            Head::Categorical { .. } => {
                let p = softmax(f);
                let pu: f64 = p.iter().zip(u).map(|(a, b)| a * b).sum();
                p.iter().zip(u).map(|(pi, ui)| pi * (ui - pu)).collect()
            }
            Head::Gaussian => u.to_vec(),
        }
    }

    /// Loss on top of the outputs for a fixed label, for use with [`Model::loss_hvp`].
    pub fn output_loss(&self, y: f64) -> HeadLoss {
        HeadLoss { head: *self, y }
    }
}

/// A head bound to one label.
#[derive(Debug, Clone, Copy)]
pub struct HeadLoss {
    head: Head,
    y: f64,
}

impl OutputLoss for HeadLoss {
    fn grad_f(&self, f: &[f64]) -> Vec<f64> {
        self.head
            .score_f(f, self.y)
            .expect("label validated before differentiation")
            .into_iter()
            .map(|v| -v)
            .collect()
    }

    fn hess_f_apply(&self, f: &[f64], u: &[f64]) -> Vec<f64> {
        self.head.f_hessian_apply(f, u)
    }
}

fn validate_pair(model: &Model, head: &Head) -> Result<()> {
    check_len("model output vs head", head.dim(), model.output_dim())
}

/// `ℓ(z; θ)` for one sample (one plain forward evaluation).
pub fn sample_loss(model: &Model, head: &Head, sample: &Sample, theta: &[f64]) -> Result<f64> {
    validate_pair(model, head)?;
    let f = model.forward(&sample.x, theta)?;
    head.nll(&f, sample.y)
}

/// `∇_θ ℓ(z; θ) = −Jᵀ score`, one reverse pass.
pub fn loss_grad(model: &Model, head: &Head, sample: &Sample, theta: &[f64]) -> Result<Vec<f64>> {
    validate_pair(model, head)?;
    head.check(&vec![0.0; head.dim()], sample.y)?;
    model.vjp_with(&sample.x, theta, |f| head.output_loss(sample.y).grad_f(f))
}

/// `∇²_θ ℓ(z; θ) v`, two reverse passes.
pub fn loss_hvp(
    model: &Model,
    head: &Head,
    sample: &Sample,
    theta: &[f64],
    v: &[f64],
) -> Result<Vec<f64>> {
    validate_pair(model, head)?;
    head.check(&vec![0.0; head.dim()], sample.y)?;
    model.loss_hvp(&sample.x, theta, &head.output_loss(sample.y), v)
}

/// Per-sample gradients `∇_θ ℓ(z_i; θ)` in index order.
pub fn per_sample_grads(
    model: &Model,
    head: &Head,
    data: &Dataset,
    theta: &[f64],
) -> Result<Vec<Vec<f64>>> {
    data.samples
        .par_iter()
        .map(|s| loss_grad(model, head, s, theta))
        .collect()
}

/// Weighted mean loss `(1/n) Σ w_i ℓ_i` (all weights 1 when `weights` is `None`).
pub fn mean_loss(
    model: &Model,
    head: &Head,
    data: &Dataset,
    theta: &[f64],
    weights: Option<&[f64]>,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    if let Some(w) = weights {
        check_len("weight vector", data.len(), w.len())?;
    }
    let losses: Vec<f64> = data
        .samples
        .par_iter()
        .map(|s| sample_loss(model, head, s, theta))
        .collect::<Result<_>>()?;
    let total: f64 = match weights {
        Some(w) => losses.iter().zip(w).map(|(l, wi)| l * wi).sum(),
        None => losses.iter().sum(),
    };
    Ok(total / data.len() as f64)
}

/// Per-sample diagnostics at `θ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossRecord {
    pub nll: Vec<f64>,
    /// `g̃_i = ‖∇_θ ℓ(z_i; θ)‖`.
    pub grad_norm: Vec<f64>,
    /// `‖t(y_i) − E[t | f(x_i; θ)]‖`.
    pub residual_norm: Vec<f64>,
}

impl LossRecord {
    pub fn compute(model: &Model, head: &Head, data: &Dataset, theta: &[f64]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidInput("empty dataset".into()));
        }
        validate_pair(model, head)?;
        let rows: Vec<(f64, f64, f64)> = data
            .samples
            .par_iter()
            .map(|s| {
                let f = model.forward(&s.x, theta)?;
                let nll = head.nll(&f, s.y)?;
                let r = norm(&head.score_f(&f, s.y)?);
                let g = norm(&loss_grad(model, head, s, theta)?);
                Ok((nll, g, r))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            nll: rows.iter().map(|r| r.0).collect(),
            grad_norm: rows.iter().map(|r| r.1).collect(),
            residual_norm: rows.iter().map(|r| r.2).collect(),
        })
    }

    /// `Ē_n = Σ_j ‖t(y_j) − E[t]‖`.
    pub fn ebar_n(&self) -> f64 {
        self.residual_norm.iter().sum()
    }

    /// `g_i = g̃_i / n`.
    pub fn scaled_grad_norm(&self) -> Vec<f64> {
        let n = self.grad_norm.len() as f64;
        self.grad_norm.iter().map(|g| g / n).collect()
    }
}

/// `Ē_n = Σ_j ‖t(y_j) − E[t | f(x_j; θ)]‖`.
pub fn ebar_n(model: &Model, head: &Head, data: &Dataset, theta: &[f64]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    validate_pair(model, head)?;
    let terms: Vec<f64> = data
        .samples
        .par_iter()
        .map(|s| {
            let f = model.forward(&s.x, theta)?;
            Ok(norm(&head.score_f(&f, s.y)?))
        })
        .collect::<Result<_>>()?;
    Ok(terms.iter().sum())
}

/// Fraction of correct argmax predictions (categorical heads).
pub fn accuracy(model: &Model, head: &Head, data: &Dataset, theta: &[f64]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    validate_pair(model, head)?;
    let hits: Vec<bool> = data
        .samples
        .par_iter()
        .map(|s| {
            let f = model.forward(&s.x, theta)?;
            let pred = f
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0;
            Ok(pred as f64 == s.y)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|h| **h).count() as f64 / data.len() as f64)
}

/// Mean squared error `(1/n) Σ (y − f)²` (Gaussian heads).
pub fn mse(model: &Model, data: &Dataset, theta: &[f64]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let errs: Vec<f64> = data
        .samples
        .par_iter()
        .map(|s| Ok((s.y - model.forward(&s.x, theta)?[0]).powi(2)))
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / data.len() as f64)
}
