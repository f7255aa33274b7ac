//! Second-order removal estimates: the Hessian infinitesimal jackknife (IJ)
//! and the Fisher-based variant with a proximal step for the penalty.
//!
//! For a weight vector `w` with `b = (1/n) Σ ∇ℓ_i (w_i − 1)`:
//!
//! - Hessian kind, smooth penalty: `θ̂ − (H + ε + 2λ)⁻¹ b`.
//! - Fisher kind without penalty: `θ̂ − (F + ε)⁻¹ b`.
//! - Otherwise: `prox^A(θ̂ − A⁻¹ g_w)` with `A` the damped curvature of the
//!   data term and `g_w = (1/n) Σ w_i ∇ℓ_i(θ̂)`.
//!
//! The prox argument only enters through `A v = A θ̂ − g_w`, so no separate
//! inverse is needed before the proximal solve.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::curvature::{
    lissa_solve, CurvatureKind, CurvatureOperator, DenseFactorization, LinearOperator, Shifted,
    SolverConfig, DENSE_CAP,
};
use crate::data::Dataset;
use crate::error::{check_len, Error, Result};
use crate::expfamily::{loss_grad, Head};
use crate::linalg::{axpy, dot, sub};
use crate::nn::Model;
use crate::objective::{b_vector, weighted_loss_grad, Regularizer, WeightVector};

/// Which samples the curvature is averaged over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurvatureWeighting {
    /// Curvature of the full training set at `θ̂` (one operator for every `w`).
    #[default]
    Full,
    /// Curvature of the retained samples only (`(1/n) Σ w_i A_i`), i.e. an
    /// exact Newton step on the reweighted objective.
    Reweighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceConfig {
    pub kind: CurvatureKind,
    pub reg: Regularizer,
    pub solver: SolverConfig,
    pub damping: f64,
    pub weighting: CurvatureWeighting,
}

impl InfluenceConfig {
    pub fn new(kind: CurvatureKind, reg: Regularizer) -> Self {
        Self {
            kind,
            reg,
            solver: SolverConfig::Dense,
            damping: 0.0,
            weighting: CurvatureWeighting::Full,
        }
    }

    pub fn with_solver(mut self, solver: SolverConfig) -> Self {
        self.solver = solver;
        self
    }

    pub fn with_damping(mut self, damping: f64) -> Self {
        self.damping = damping;
        self
    }

    pub fn with_weighting(mut self, weighting: CurvatureWeighting) -> Self {
        self.weighting = weighting;
        self
    }
}

/// Metric used by [`prox`].
pub enum ProxMetric<'a> {
    /// `c · I`.
    Scaled(f64),
    Operator(&'a dyn LinearOperator),
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

/// `argmin_θ (v − θ)ᵀ D (v − θ) + 2λ π(θ)`.
///
/// `L2` under a general metric is solved from `(D + 2λI) θ = D v` with
/// `solver`; `L1` under a general metric uses [`prox_coordinate_descent`] on
/// the materialized metric.
pub fn prox(metric: ProxMetric<'_>, reg: &Regularizer, v: &[f64], solver: &SolverConfig) -> Result<Vec<f64>> {
    match (metric, *reg) {
        (_, r) if r.lambda() == 0.0 => Ok(v.to_vec()),
        (ProxMetric::Scaled(c), reg) => {
            if !(c > 0.0) {
                return Err(Error::Numerical(format!(
                    "proximal metric scale {c} is not positive; add damping"
                )));
            }
            Ok(match reg {
                Regularizer::L2(l) => v.iter().map(|t| c * t / (c + 2.0 * l)).collect(),
                Regularizer::L1(l) => v.iter().map(|t| soft_threshold(*t, l / c)).collect(),
                Regularizer::None => unreachable!(),
            })
        }
        (ProxMetric::Operator(op), reg) => {
            let dv = op.matvec(v)?;
            prox_from_moment(op, &dv, &reg, solver)
        }
    }
}

/// Prox given `D v` instead of `v`.
fn prox_from_moment(
    op: &dyn LinearOperator,
    dv: &[f64],
    reg: &Regularizer,
    solver: &SolverConfig,
) -> Result<Vec<f64>> {
    match *reg {
        Regularizer::None => Err(Error::InvalidInput(
            "prox without a penalty needs v, not D v".into(),
        )),
        Regularizer::L2(l) => {
            let shifted = Shifted {
                inner: op,
                shift: 2.0 * l,
            };
            solve_once(&shifted, dv, solver)
        }
        Regularizer::L1(_) => {
            if op.dim() > DENSE_CAP {
                return Err(Error::InvalidInput(format!(
                    "L1 prox under a curvature metric needs d ≤ {DENSE_CAP}"
                )));
            }
            coordinate_descent(&op.to_dense()?, dv, reg)
        }
    }
}

fn solve_once(op: &dyn LinearOperator, x: &[f64], solver: &SolverConfig) -> Result<Vec<f64>> {
    match solver {
        SolverConfig::Dense => DenseFactorization::new(op, 0.0)?.solve(x),
        SolverConfig::Lissa(cfg) => lissa_solve(op, x, cfg),
    }
}

/// Cyclic coordinate descent for the prox under a dense metric `D`, with
/// exact per-coordinate minimization (soft threshold for `L1`). Handles
/// `L2` too, as a cross-check of the closed form.
pub fn prox_coordinate_descent(d: &DMatrix<f64>, reg: &Regularizer, v: &[f64]) -> Result<Vec<f64>> {
    check_len("prox input", d.nrows(), v.len())?;
    let dv: Vec<f64> = (d * nalgebra::DVector::from_column_slice(v)).data.into();
    if matches!(reg, Regularizer::None) {
        return Ok(v.to_vec());
    }
    coordinate_descent(d, &dv, reg)
}

/// Minimizes `θᵀDθ − 2θᵀ(Dv) + 2λπ(θ)` (the prox objective up to a constant).
fn coordinate_descent(d: &DMatrix<f64>, dv: &[f64], reg: &Regularizer) -> Result<Vec<f64>> {
    let n = dv.len();
    let m = (d + d.transpose()) * 0.5;
    for j in 0..n {
        if !(m[(j, j)] > 0.0) {
            return Err(Error::Numerical(format!(
                "proximal metric has non-positive diagonal entry {} at {j}; add damping",
                m[(j, j)]
            )));
        }
    }
    let objective = |theta: &[f64], dtheta: &[f64]| -> f64 {
        dot(theta, dtheta) - 2.0 * dot(theta, dv) + 2.0 * reg.value(theta)
    };
    let mut theta = vec![0.0; n];
    // dtheta = D θ, kept up to date.
    let mut dtheta = vec![0.0; n];
    let mut obj = 0.0_f64;
    for _sweep in 0..100_000 {
        let mut max_step = 0.0_f64;
        for j in 0..n {
            let djj = m[(j, j)];
            // Linear coefficient with θ_j removed.
            let c = dv[j] - (dtheta[j] - djj * theta[j]);
            let new = match *reg {
                Regularizer::L1(l) => soft_threshold(c, l) / djj,
                Regularizer::L2(l) => c / (djj + 2.0 * l),
                Regularizer::None => c / djj,
            };
            let step = new - theta[j];
            if step != 0.0 {
                for k in 0..n {
                    dtheta[k] += m[(k, j)] * step;
                }
                theta[j] = new;
                max_step = max_step.max(step.abs());
            }
        }
        let new_obj = objective(&theta, &dtheta);
        if new_obj > obj + 1e-9 * (1.0 + obj.abs()) {
            return Err(Error::Numerical(
                "proximal objective increased; the metric is not positive semidefinite, add damping".into(),
            ));
        }
        let decrease = obj - new_obj;
        obj = new_obj;
        let scale = 1.0 + theta.iter().fold(0.0_f64, |a, t| a.max(t.abs()));
        if decrease <= 1e-10 * (1.0 + obj.abs()) && max_step <= 1e-13 * scale {
            return Ok(theta);
        }
    }
    Err(Error::Numerical("proximal coordinate descent did not converge".into()))
}

/// `θ̂ − A⁻¹ b` for an operator that already holds any damping/penalty terms.
pub fn second_order_estimate(
    op: &dyn LinearOperator,
    theta_hat: &[f64],
    b: &[f64],
    solver: &SolverConfig,
) -> Result<Vec<f64>> {
    check_len("parameter vector", op.dim(), theta_hat.len())?;
    if b.iter().all(|v| *v == 0.0) {
        return Ok(theta_hat.to_vec());
    }
    let step = solve_once(op, b, solver)?;
    Ok(sub(theta_hat, &step))
}

/// Removal estimates `θ̃(w)` around a fitted `θ̂`.
pub struct Estimator<'a> {
    model: &'a Model,
    head: Head,
    data: &'a Dataset,
    theta_hat: Vec<f64>,
    cfg: InfluenceConfig,
    /// Damped data-term curvature at full weights (`+2λ` for a Hessian with `L2`).
    op: CurvatureOperator<'a>,
    linear: OnceLock<DenseFactorization>,
    full_grad: OnceLock<Vec<f64>>,
    op_theta: OnceLock<Vec<f64>>,
}

impl<'a> Estimator<'a> {
    pub fn new(
        model: &'a Model,
        head: Head,
        data: &'a Dataset,
        theta_hat: &[f64],
        cfg: InfluenceConfig,
    ) -> Result<Self> {
        let op = CurvatureOperator::new(cfg.kind, model, head, data, theta_hat)?
            .with_regularizer(&cfg.reg)
            .with_damping(cfg.damping)?;
        Ok(Self {
            model,
            head,
            data,
            theta_hat: theta_hat.to_vec(),
            cfg,
            op,
            linear: OnceLock::new(),
            full_grad: OnceLock::new(),
            op_theta: OnceLock::new(),
        })
    }

    pub fn config(&self) -> &InfluenceConfig {
        &self.cfg
    }

    pub fn theta_hat(&self) -> &[f64] {
        &self.theta_hat
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn data(&self) -> &Dataset {
        self.data
    }

    pub fn head(&self) -> Head {
        self.head
    }

    /// Extra shift of the linearized operator on top of `op` (Fisher with `L2`).
    fn linear_shift(&self) -> f64 {
        match (self.cfg.kind, self.cfg.reg) {
            (CurvatureKind::Fisher, Regularizer::L2(l)) => 2.0 * l,
            _ => 0.0,
        }
    }

    /// Operator of the first-order displacement `θ̃(w) − θ̂ ≈ −A⁻¹ b`:
    /// the damped curvature plus `2λI` for `L2`. For `L1` the smooth part only.
    pub fn linear_operator(&self) -> Shifted<'_> {
        Shifted {
            inner: &self.op,
            shift: self.linear_shift(),
        }
    }

    /// `A_lin⁻¹ x`, factorizing once for the dense solver.
    pub fn solve_linear(&self, x: &[f64]) -> Result<Vec<f64>> {
        match &self.cfg.solver {
            SolverConfig::Dense => {
                if self.linear.get().is_none() {
                    let f = DenseFactorization::new_auto(&self.linear_operator(), 0.0)?;
                    let _ = self.linear.set(f);
                }
                self.linear.get().expect("factorization cached").solve(x)
            }
            SolverConfig::Lissa(cfg) => lissa_solve(&self.linear_operator(), x, cfg),
        }
    }

    /// Builds the cached factorization and gradients up front so that
    /// concurrent callers share them.
    pub fn prepare(&self) -> Result<()> {
        if self.cfg.weighting == CurvatureWeighting::Full {
            if self.cfg.solver == SolverConfig::Dense {
                self.solve_linear(&vec![0.0; self.theta_hat.len()])?;
            }
            if self.uses_prox() {
                self.full_grad()?;
                if !matches!(self.cfg.reg, Regularizer::L2(_)) {
                    self.op_theta()?;
                }
            }
        }
        Ok(())
    }

    /// Extra damping the dense path added for conditioning (0 if none or LiSSA).
    pub fn auto_damping(&self) -> f64 {
        self.linear.get().map(|f| f.damping()).unwrap_or(0.0)
    }

    pub fn b_vector(&self, w: &WeightVector) -> Result<Vec<f64>> {
        b_vector(self.model, &self.head, self.data, &self.theta_hat, w)
    }

    fn full_grad(&self) -> Result<&Vec<f64>> {
        if self.full_grad.get().is_none() {
            let g = weighted_loss_grad(
                self.model,
                &self.head,
                self.data,
                &self.theta_hat,
                &WeightVector::all_ones(self.data.len()),
            )?;
            let _ = self.full_grad.set(g);
        }
        Ok(self.full_grad.get().expect("cached"))
    }

    fn op_theta(&self) -> Result<&Vec<f64>> {
        if self.op_theta.get().is_none() {
            let v = self.op.matvec(&self.theta_hat)?;
            let _ = self.op_theta.set(v);
        }
        Ok(self.op_theta.get().expect("cached"))
    }

    /// `θ̃(w)`.
    pub fn estimate(&self, w: &WeightVector) -> Result<Vec<f64>> {
        check_len("weight vector", self.data.len(), w.len())?;
        if w.is_all_ones() {
            return Ok(self.theta_hat.clone());
        }
        match self.cfg.weighting {
            CurvatureWeighting::Full => self.estimate_full(w),
            CurvatureWeighting::Reweighted => self.estimate_reweighted(w),
        }
    }

    fn uses_prox(&self) -> bool {
        match (self.cfg.kind, self.cfg.reg) {
            (_, Regularizer::None) => false,
            (CurvatureKind::Hessian, Regularizer::L2(_)) => false,
            _ => true,
        }
    }

    fn estimate_full(&self, w: &WeightVector) -> Result<Vec<f64>> {
        let b = self.b_vector(w)?;
        if !self.uses_prox() {
            let step = self.solve_linear(&b)?;
            return Ok(sub(&self.theta_hat, &step));
        }
        // A v = A θ̂ − g_w with g_w = g_1 + b.
        if let Regularizer::L2(l) = self.cfg.reg {
            // (A + 2λ)(v − θ̂) = −(g_w + 2λθ̂): solving for the displacement keeps
            // the right-hand side small, which matters for truncated solvers.
            let mut rhs = self.full_grad()?.clone();
            axpy(1.0, &b, &mut rhs);
            axpy(2.0 * l, &self.theta_hat, &mut rhs);
            let step = self.solve_linear(&rhs)?;
            return Ok(sub(&self.theta_hat, &step));
        }
        let mut moment = self.op_theta()?.clone();
        axpy(-1.0, self.full_grad()?, &mut moment);
        axpy(-1.0, &b, &mut moment);
        prox_from_moment(&self.op, &moment, &self.cfg.reg, &self.cfg.solver)
    }

    fn estimate_reweighted(&self, w: &WeightVector) -> Result<Vec<f64>> {
        let op = self.op.clone().with_weights(w)?;
        if !self.uses_prox() {
            let b = self.b_vector(w)?;
            let shifted = Shifted {
                inner: &op,
                shift: self.linear_shift(),
            };
            return second_order_estimate(&shifted, &self.theta_hat, &b, &self.cfg.solver);
        }
        let g_w = weighted_loss_grad(self.model, &self.head, self.data, &self.theta_hat, w)?;
        if let Regularizer::L2(l) = self.cfg.reg {
            let mut rhs = g_w;
            axpy(2.0 * l, &self.theta_hat, &mut rhs);
            let shifted = Shifted { inner: &op, shift: 2.0 * l };
            let step = solve_once(&shifted, &rhs, &self.cfg.solver)?;
            return Ok(sub(&self.theta_hat, &step));
        }
        let mut moment = op.matvec(&self.theta_hat)?;
        axpy(-1.0, &g_w, &mut moment);
        prox_from_moment(&op, &moment, &self.cfg.reg, &self.cfg.solver)
    }

    /// `θ̃(1^{n∖i})` for every `i` in `indices`, in order.
    pub fn leave_one_out(&self, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
        let n = self.data.len();
        indices
            .iter()
            .map(|&i| self.estimate(&WeightVector::leave_one_out(n, i)?))
            .collect()
    }

    /// First-order effect of removing each sample on a scalar objective with
    /// gradient `grad_t` at `θ̂`: `⟨grad_t, −A_lin⁻¹ b_i⟩ = (1/n) ⟨A_lin⁻¹ grad_t, ∇ℓ_i⟩`.
    /// Uses one inverse product for all samples.
    pub fn removal_effects(&self, grad_t: &[f64], indices: &[usize]) -> Result<Vec<f64>> {
        check_len("objective gradient", self.theta_hat.len(), grad_t.len())?;
        let n = self.data.len() as f64;
        let u = self.solve_linear(grad_t)?;
        use rayon::prelude::*;
        indices
            .par_iter()
            .map(|&i| {
                let g = loss_grad(self.model, &self.head, &self.data.samples[i], &self.theta_hat)?;
                Ok(dot(&u, &g) / n)
            })
            .collect()
    }
}

/// How an inference objective is evaluated at the estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorMode {
    /// `T(θ̃)`.
    Plugin,
    /// `T(θ̂) + ⟨∇T(θ̂), θ̃ − θ̂⟩`.
    Linearized,
}

/// Evaluates a scalar inference objective `T` at the removal estimate.
pub fn influence_estimate<F>(
    objective: F,
    theta_hat: &[f64],
    theta_tilde: &[f64],
    mode: EstimatorMode,
    grad_t: Option<&[f64]>,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    check_len("estimate", theta_hat.len(), theta_tilde.len())?;
    match mode {
        EstimatorMode::Plugin => objective(theta_tilde),
        EstimatorMode::Linearized => {
            let g = grad_t.ok_or_else(|| {
                Error::InvalidInput("the linearized estimator needs the objective gradient".into())
            })?;
            check_len("objective gradient", theta_hat.len(), g.len())?;
            Ok(objective(theta_hat)? + dot(g, &sub(theta_tilde, theta_hat)))
        }
    }
}

/// Per-sample influence values with diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub method: CurvatureKind,
    pub estimator: EstimatorMode,
    pub indices: Vec<usize>,
    pub influence: Vec<f64>,
    /// `g_i = ‖∇ℓ_i(θ̂)‖ / n`.
    pub g: Vec<f64>,
    pub ebar_n: f64,
    pub fwd_passes: u64,
    pub rev_passes: u64,
}

impl InfluenceReport {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["index", "influence", "g_i"])?;
        for ((i, v), g) in self.indices.iter().zip(&self.influence).zip(&self.g) {
            w.write_record([i.to_string(), format!("{v:e}"), format!("{g:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}
