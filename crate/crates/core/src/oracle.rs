//! Brute-force references: exact retraining, exact cross-validation and
//! finite-difference checks of the differentiation primitives.
//!
//! Retraining only relies on model evaluation and per-sample loss gradients;
//! it never touches curvature operators or removal estimates.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curvature::{CurvatureKind, CurvatureOperator, LinearOperator};
use crate::data::{sample_folds, Dataset};
use crate::error::{check_len, Error, Result};
use crate::expfamily::{loss_grad, loss_hvp, sample_loss, Head};
use crate::linalg::{dot, norm, sub};
use crate::nn::{Activation, Model};
use crate::objective::{Regularizer, WeightVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMethod {
    /// Closed form when the problem is ridge-like, gradient descent otherwise.
    Auto,
    GradientDescent,
    ClosedForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub method: RetrainMethod,
    /// Stationarity tolerance on the (proximal) gradient norm.
    pub tol: f64,
    pub max_iter: usize,
    /// Start from the supplied parameters instead of zero.
    pub warm_start: bool,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            method: RetrainMethod::Auto,
            tol: 1e-10,
            max_iter: 200_000,
            warm_start: true,
        }
    }
}

fn is_ridge(model: &Model, head: &Head, reg: &Regularizer) -> bool {
    model.is_linear() && *head == Head::Gaussian && reg.is_smooth()
}

/// `(XᵀWX + 2nλI) θ = XᵀWy` with the bias column appended when present.
fn ridge_closed_form(model: &Model, data: &Dataset, w: &[f64], reg: &Regularizer) -> Result<Vec<f64>> {
    let spec = model.architecture().layers[0];
    let p = model.num_params();
    let n = data.len() as f64;
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for (s, &wi) in data.samples.iter().zip(w) {
        if wi == 0.0 {
            continue;
        }
        let mut row = s.x.clone();
        if spec.bias {
            row.push(1.0);
        }
        let r = DVector::from_vec(row);
        a += wi * &r * r.transpose();
        rhs += wi * s.y * &r;
    }
    let lam2n = 2.0 * n * reg.lambda();
    for j in 0..p {
        a[(j, j)] += lam2n;
    }
    let sol = match a.clone().cholesky() {
        Some(c) => c.solve(&rhs),
        None => a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("closed-form system is singular".into()))?,
    };
    Ok(sol.data.into())
}

/// Value of `(1/n) Σ w_i ℓ_i(θ)` (smooth part).
fn data_objective(model: &Model, head: &Head, data: &Dataset, w: &[f64], theta: &[f64]) -> Result<f64> {
    let parts: Vec<f64> = data
        .samples
        .par_iter()
        .zip(w.par_iter())
        .map(|(s, &wi)| if wi == 0.0 { Ok(0.0) } else { Ok(wi * sample_loss(model, head, s, theta)?) })
        .collect::<Result<_>>()?;
    Ok(parts.iter().sum::<f64>() / data.len() as f64)
}

fn data_gradient(model: &Model, head: &Head, data: &Dataset, w: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    let grads: Vec<Vec<f64>> = data
        .samples
        .par_iter()
        .zip(w.par_iter())
        .map(|(s, &wi)| {
            if wi == 0.0 {
                Ok(Vec::new())
            } else {
                let mut g = loss_grad(model, head, s, theta)?;
                g.iter_mut().for_each(|v| *v *= wi);
                Ok(g)
            }
        })
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; theta.len()];
    for g in grads.iter().filter(|g| !g.is_empty()) {
        for (o, v) in out.iter_mut().zip(g) {
            *o += v;
        }
    }
    let n = data.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Smooth objective (data term plus `L2` penalty) and its gradient.
fn smooth_value_grad(
    model: &Model,
    head: &Head,
    data: &Dataset,
    w: &[f64],
    reg: &Regularizer,
    theta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let mut f = data_objective(model, head, data, w, theta)?;
    let mut g = data_gradient(model, head, data, w, theta)?;
    if let Regularizer::L2(l) = *reg {
        f += l * dot(theta, theta);
        for (gj, t) in g.iter_mut().zip(theta) {
            *gj += 2.0 * l * t;
        }
    }
    Ok((f, g))
}

fn prox_step(reg: &Regularizer, theta: &[f64], g: &[f64], t: f64) -> Vec<f64> {
    let raw: Vec<f64> = theta.iter().zip(g).map(|(a, b)| a - t * b).collect();
    match *reg {
        Regularizer::L1(l) => raw
            .into_iter()
            .map(|v| v.signum() * (v.abs() - t * l).max(0.0))
            .collect(),
        _ => raw,
    }
}

/// `θ̂(w) = argmin (1/n) Σ w_i ℓ_i(θ) + λπ(θ)`.
///
/// Gradient descent uses Barzilai–Borwein trial steps with backtracking on
/// the quadratic upper bound; `L1` is handled by proximal steps. Converged
/// when the gradient mapping norm is at most `cfg.tol`.
pub fn retrain(
    model: &Model,
    head: &Head,
    data: &Dataset,
    w: &WeightVector,
    reg: &Regularizer,
    init: &[f64],
    cfg: &RetrainConfig,
) -> Result<Vec<f64>> {
    check_len("weight vector", data.len(), w.len())?;
    check_len("parameter vector", model.num_params(), init.len())?;
    let method = match cfg.method {
        RetrainMethod::Auto if is_ridge(model, head, reg) => RetrainMethod::ClosedForm,
        RetrainMethod::Auto => RetrainMethod::GradientDescent,
        m => m,
    };
    if method == RetrainMethod::ClosedForm {
        if !is_ridge(model, head, reg) {
            return Err(Error::InvalidInput(
                "closed-form retraining needs a linear model, Gaussian head and smooth penalty".into(),
            ));
        }
        return ridge_closed_form(model, data, w.as_slice(), reg);
    }
    let w = w.as_slice();
    let mut theta = if cfg.warm_start {
        init.to_vec()
    } else {
        vec![0.0; init.len()]
    };
    let (mut f, mut g) = smooth_value_grad(model, head, data, w, reg, &theta)?;
    let mut t = 1.0;
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut last_measure = f64::INFINITY;
    for _ in 0..cfg.max_iter {
        if let Some((tp, gp)) = &prev {
            let s = sub(&theta, tp);
            let y = sub(&g, gp);
            let sy = dot(&s, &y);
            if sy > 0.0 {
                t = (dot(&s, &s) / sy).clamp(1e-12, 1e12);
            }
        }
        // Stationarity via the gradient mapping at the current trial step.
        let mut accepted = None;
        for _ in 0..80 {
            let cand = prox_step(reg, &theta, &g, t);
            let d = sub(&cand, &theta);
            let (fc, gc) = smooth_value_grad(model, head, data, w, reg, &cand)?;
            let bound = f + dot(&g, &d) + dot(&d, &d) / (2.0 * t);
            if fc <= bound + 1e-14 * (1.0 + f.abs()) {
                accepted = Some((cand, fc, gc, d));
                break;
            }
            t *= 0.5;
        }
        let (cand, fc, gc, d) = accepted.ok_or(Error::Convergence {
            iterations: cfg.max_iter,
            grad_norm: last_measure,
        })?;
        last_measure = norm(&d) / t;
        if !fc.is_finite() {
            return Err(Error::Convergence {
                iterations: 0,
                grad_norm: f64::NAN,
            });
        }
        prev = Some((std::mem::replace(&mut theta, cand), std::mem::replace(&mut g, gc)));
        f = fc;
        let measure = stationarity(reg, &theta, &g);
        if measure <= cfg.tol {
            return Ok(theta);
        }
    }
    Err(Error::Convergence {
        iterations: cfg.max_iter,
        grad_norm: stationarity(reg, &theta, &g),
    })
}

/// Norm of the (minimum-norm sub-)gradient of the full objective.
fn stationarity(reg: &Regularizer, theta: &[f64], g: &[f64]) -> f64 {
    match *reg {
        Regularizer::L1(l) => theta
            .iter()
            .zip(g)
            .map(|(&t, &gj)| {
                if t != 0.0 {
                    (gj + l * t.signum()).powi(2)
                } else {
                    (gj.abs() - l).max(0.0).powi(2)
                }
            })
            .sum::<f64>()
            .sqrt(),
        _ => norm(g),
    }
}

/// Exact cross-validation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvEstimate {
    pub mean: f64,
    pub per_fold: Vec<f64>,
    pub folds: Vec<Vec<usize>>,
}

/// Retrains without each fold and averages the held-out mean loss.
#[allow(clippy::too_many_arguments)]
pub fn exact_cv(
    model: &Model,
    head: &Head,
    data: &Dataset,
    reg: &Regularizer,
    k: usize,
    folds: usize,
    seed: u64,
    theta_hat: &[f64],
    cfg: &RetrainConfig,
) -> Result<CvEstimate> {
    let fold_sets = sample_folds(data.len(), k, folds, seed)?;
    let per_fold: Vec<f64> = fold_sets
        .par_iter()
        .map(|fold| {
            let w = WeightVector::leave_k_out(data.len(), fold)?;
            let theta = retrain(model, head, data, &w, reg, theta_hat, cfg)?;
            held_out_loss(model, head, data, fold, &theta)
        })
        .collect::<Result<_>>()?;
    Ok(CvEstimate {
        mean: per_fold.iter().sum::<f64>() / per_fold.len() as f64,
        per_fold,
        folds: fold_sets,
    })
}

/// Mean loss over `indices` at `theta`.
pub fn held_out_loss(model: &Model, head: &Head, data: &Dataset, indices: &[usize], theta: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for &i in indices {
        total += sample_loss(model, head, &data.samples[i], theta)?;
    }
    Ok(total / indices.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FdTarget {
    Grad,
    Hvp,
    Jvp,
    Vjp,
    Fisher,
}

impl FdTarget {
    pub const ALL: [FdTarget; 5] = [FdTarget::Grad, FdTarget::Hvp, FdTarget::Jvp, FdTarget::Vjp, FdTarget::Fisher];

    pub fn name(&self) -> &'static str {
        match self {
            FdTarget::Grad => "grad",
            FdTarget::Hvp => "hvp",
            FdTarget::Jvp => "jvp",
            FdTarget::Vjp => "vjp",
            FdTarget::Fisher => "fisher",
        }
    }
}

/// Outcome of one check; errors are `‖a − b‖ / (1 + ‖a‖)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub target: FdTarget,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub const FD_STEP: f64 = 1e-4;

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    norm(&sub(a, b)) / (1.0 + norm(a))
}

fn random_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn shifted(theta: &[f64], v: &[f64], eps: f64) -> Vec<f64> {
    theta.iter().zip(v).map(|(t, d)| t + eps * d).collect()
}

/// Compares one primitive against its brute-force reference on `samples`.
/// Never fails on a numerical mismatch; the report carries the verdict.
pub fn fd_check(
    target: FdTarget,
    model: &Model,
    head: &Head,
    samples: &Dataset,
    theta: &[f64],
    tolerance: f64,
    seed: u64,
) -> Result<FdReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.num_params();
    let eps = FD_STEP;
    let mut worst = 0.0_f64;
    match target {
        FdTarget::Grad => {
            for s in &samples.samples {
                let g = loss_grad(model, head, s, theta)?;
                let mut fd = vec![0.0; d];
                for (j, fj) in fd.iter_mut().enumerate() {
                    let mut e = vec![0.0; d];
                    e[j] = 1.0;
                    let lp = sample_loss(model, head, s, &shifted(theta, &e, eps))?;
                    let lm = sample_loss(model, head, s, &shifted(theta, &e, -eps))?;
                    *fj = (lp - lm) / (2.0 * eps);
                }
                worst = worst.max(rel_err(&g, &fd));
            }
        }
        FdTarget::Hvp => {
            for s in &samples.samples {
                let v = random_direction(&mut rng, d);
                let u = random_direction(&mut rng, d);
                let hv = loss_hvp(model, head, s, theta, &v)?;
                let gp = loss_grad(model, head, s, &shifted(theta, &v, eps))?;
                let gm = loss_grad(model, head, s, &shifted(theta, &v, -eps))?;
                let fd: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * eps)).collect();
                worst = worst.max(rel_err(&hv, &fd));
                let hu = loss_hvp(model, head, s, theta, &u)?;
                let (a, b) = (dot(&u, &hv), dot(&v, &hu));
                worst = worst.max((a - b).abs() / (1.0 + a.abs()));
            }
        }
        FdTarget::Jvp => {
            for s in &samples.samples {
                let a = random_direction(&mut rng, d);
                let u = random_direction(&mut rng, model.output_dim());
                let jv = model.jvp(&s.x, theta, &a)?;
                let fp = model.forward(&s.x, &shifted(theta, &a, eps))?;
                let fm = model.forward(&s.x, &shifted(theta, &a, -eps))?;
                let fd: Vec<f64> = fp.iter().zip(&fm).map(|(p, m)| (p - m) / (2.0 * eps)).collect();
                worst = worst.max(rel_err(&jv, &fd));
                let vj = model.vjp(&s.x, theta, &u)?;
                let (l, r) = (dot(&u, &jv), dot(&vj, &a));
                worst = worst.max((l - r).abs() / (1.0 + l.abs()));
            }
        }
        FdTarget::Vjp => {
            for s in &samples.samples {
                let u = random_direction(&mut rng, model.output_dim());
                let vj = model.vjp(&s.x, theta, &u)?;
                let mut fd = vec![0.0; d];
                for (j, fj) in fd.iter_mut().enumerate() {
                    let mut e = vec![0.0; d];
                    e[j] = 1.0;
                    let fp = model.forward(&s.x, &shifted(theta, &e, eps))?;
                    let fm = model.forward(&s.x, &shifted(theta, &e, -eps))?;
                    *fj = (dot(&u, &fp) - dot(&u, &fm)) / (2.0 * eps);
                }
                worst = worst.max(rel_err(&vj, &fd));
            }
        }
        FdTarget::Fisher => {
            let dense = dense_fisher_from_jacobians(model, head, samples, theta)?;
            let op = CurvatureOperator::new(CurvatureKind::Fisher, model, *head, samples, theta)?;
            for _ in 0..3 {
                let v = random_direction(&mut rng, d);
                let reference: Vec<f64> = (&dense * DVector::from_column_slice(&v)).data.into();
                worst = worst.max(rel_err(&reference, &op.matvec(&v)?));
            }
        }
    }
    Ok(FdReport {
        target,
        max_rel_err: worst,
        tolerance,
        passed: worst <= tolerance,
    })
}

/// `(1/n) Σ J_iᵀ H_f(f_i) J_i` from explicit Jacobians.
pub fn dense_fisher_from_jacobians(model: &Model, head: &Head, data: &Dataset, theta: &[f64]) -> Result<DMatrix<f64>> {
    let d = model.num_params();
    let k = model.output_dim();
    let mut out = DMatrix::zeros(d, d);
    for s in &data.samples {
        let rows = model.jacobian(&s.x, theta)?;
        let j = DMatrix::from_fn(k, d, |r, c| rows[r][c]);
        let f = model.forward(&s.x, theta)?;
        let hf = head.f_hessian(&f)?;
        out += j.transpose() * hf * &j;
    }
    Ok(out / data.len() as f64)
}

/// Reference models used by `influence oracle --check all`.
pub fn reference_models(input: usize, classes: usize) -> Vec<(&'static str, crate::nn::Architecture)> {
    use crate::nn::{Architecture, LayerSpec};
    vec![
        ("linear", Architecture::linear(input, classes, true)),
        ("relu-1", Architecture::mlp(&[input, 8, classes], Activation::Relu)),
        (
            "selu-2",
            Architecture {
                layers: vec![
                    LayerSpec { input, output: 6, act: Activation::Selu, bias: true },
                    LayerSpec { input: 6, output: 5, act: Activation::Selu, bias: true },
                    LayerSpec { input: 5, output: classes, act: Activation::Identity, bias: true },
                ],
            },
        ),
    ]
}
