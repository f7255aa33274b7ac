//! Matrix-free curvature operators and inverse solvers.
//!
//! [`CurvatureOperator`] applies either the approximate Fisher
//! `F = (1/n) Σ J_iᵀ H_f(f_i) J_i` (one JVP and one VJP per sample) or the
//! Hessian of the data term `(1/n) Σ ∇²ℓ_i` (reverse-over-reverse, two reverse
//! passes per sample). Per-sample terms are summed in fixed chunks so results
//! do not depend on thread scheduling.
//!
//! Inverse products come from [`DenseFactorization`] (small `d`) or the
//! truncated Neumann recursion in [`lissa_solve`].

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{check_len, Error, Result};
use crate::expfamily::{loss_hvp, Head};
use crate::linalg::{axpy, norm, sym_eigen_range};
use crate::nn::Model;
use crate::objective::{Regularizer, WeightVector};

/// Largest dimension that may be materialized densely.
pub const DENSE_CAP: usize = 2000;
/// Iterate norm at which LiSSA is declared divergent.
pub const DIVERGENCE_NORM: f64 = 1e12;
/// Datasets up to this size use full-batch matvecs inside LiSSA by default.
pub const FULL_BATCH_LIMIT: usize = 4096;
pub const DEFAULT_BATCH: usize = 512;

const CHUNK: usize = 64;

/// A symmetric linear map on `ℝ^d`.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;

    fn matvec(&self, v: &[f64]) -> Result<Vec<f64>>;

    /// Unbiased estimate of `A v` from a random mini-batch. `batch = None`
    /// lets the operator choose. Operators without a data term return `A v`.
    fn stochastic_matvec(
        &self,
        v: &[f64],
        _batch: Option<usize>,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        self.matvec(v)
    }

    /// Materializes the operator column by column.
    fn to_dense(&self) -> Result<DMatrix<f64>> {
        let d = self.dim();
        if d > DENSE_CAP {
            return Err(Error::InvalidInput(format!(
                "dimension {d} exceeds the dense cap of {DENSE_CAP}"
            )));
        }
        let mut m = DMatrix::zeros(d, d);
        let mut e = vec![0.0; d];
        for j in 0..d {
            e[j] = 1.0;
            let col = self.matvec(&e)?;
            m.set_column(j, &DVector::from_vec(col));
            e[j] = 0.0;
        }
        Ok(m)
    }
}

/// An explicit matrix, mostly for tests and reference computations.
#[derive(Debug, Clone)]
pub struct DenseOperator(pub DMatrix<f64>);

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("matvec input", self.dim(), v.len())?;
        Ok((&self.0 * DVector::from_column_slice(v)).data.into())
    }

    fn to_dense(&self) -> Result<DMatrix<f64>> {
        Ok(self.0.clone())
    }
}

/// `A + shift·I`.
pub struct Shifted<'a> {
    pub inner: &'a dyn LinearOperator,
    pub shift: f64,
}

impl LinearOperator for Shifted<'_> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.inner.matvec(v)?;
        axpy(self.shift, v, &mut out);
        Ok(out)
    }

    fn stochastic_matvec(
        &self,
        v: &[f64],
        batch: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        let mut out = self.inner.stochastic_matvec(v, batch, rng)?;
        axpy(self.shift, v, &mut out);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurvatureKind {
    Fisher,
    Hessian,
}

impl CurvatureKind {
    pub fn name(&self) -> &'static str {
        match self {
            CurvatureKind::Fisher => "fisher",
            CurvatureKind::Hessian => "hessian",
        }
    }
}

impl std::str::FromStr for CurvatureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fisher" => Ok(CurvatureKind::Fisher),
            "hessian" => Ok(CurvatureKind::Hessian),
            other => Err(Error::Usage(format!("unknown curvature kind '{other}'"))),
        }
    }
}

/// Fisher or Hessian of the (weighted) training loss at fixed parameters.
#[derive(Clone)]
pub struct CurvatureOperator<'a> {
    kind: CurvatureKind,
    model: &'a Model,
    head: Head,
    data: &'a Dataset,
    theta: Vec<f64>,
    reg_curvature: f64,
    damping: f64,
    weights: Option<Vec<f64>>,
}

impl<'a> CurvatureOperator<'a> {
    pub fn new(
        kind: CurvatureKind,
        model: &'a Model,
        head: Head,
        data: &'a Dataset,
        theta: &[f64],
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidInput("curvature of an empty dataset".into()));
        }
        check_len("parameter vector", model.num_params(), theta.len())?;
        check_len("model output vs head", head.dim(), model.output_dim())?;
        check_len("covariate", model.input_dim(), data.num_features())?;
        head.check_dataset(data)?;
        Ok(Self {
            kind,
            model,
            head,
            data,
            theta: theta.to_vec(),
            reg_curvature: 0.0,
            damping: 0.0,
            weights: None,
        })
    }

    /// Adds the penalty curvature (`2λI` for `L2`) to a Hessian operator.
    /// Fisher operators never include the penalty, and `L1` has none.
    pub fn with_regularizer(mut self, reg: &Regularizer) -> Self {
        if self.kind == CurvatureKind::Hessian {
            self.reg_curvature = reg.smooth_curvature();
        }
        self
    }

    pub fn with_damping(mut self, damping: f64) -> Result<Self> {
        if !(damping >= 0.0 && damping.is_finite()) {
            return Err(Error::InvalidInput(format!("damping must be ≥ 0, got {damping}")));
        }
        self.damping = damping;
        Ok(self)
    }

    /// Per-sample weights in the data term, `(1/n) Σ w_i A_i`.
    pub fn with_weights(mut self, w: &WeightVector) -> Result<Self> {
        check_len("weight vector", self.data.len(), w.len())?;
        self.weights = if w.is_all_ones() {
            None
        } else {
            Some(w.as_slice().to_vec())
        };
        Ok(self)
    }

    pub fn kind(&self) -> CurvatureKind {
        self.kind
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    /// Curvature contribution of one sample.
    fn sample_term(&self, s: &Sample, v: &[f64]) -> Result<Vec<f64>> {
        match self.kind {
            CurvatureKind::Fisher => {
                let (f, jv) = self.model.jvp_with_value(&s.x, &self.theta, v)?;
                let hjv = self.head.f_hessian_apply(&f, &jv);
                self.model.vjp(&s.x, &self.theta, &hjv)
            }
            CurvatureKind::Hessian => loss_hvp(self.model, &self.head, s, &self.theta, v),
        }
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map(|w| w[i]).unwrap_or(1.0)
    }

    /// `scale · Σ_{i ∈ idx} w_i A_i v`, chunk partials summed in order.
    fn data_term(&self, idx: &[usize], scale: f64, v: &[f64]) -> Result<Vec<f64>> {
        let d = v.len();
        let partials: Vec<Vec<f64>> = idx
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = vec![0.0; d];
                for &i in chunk {
                    let w = self.weight(i);
                    if w == 0.0 {
                        continue;
                    }
                    let term = self.sample_term(&self.data.samples[i], v)?;
                    axpy(w, &term, &mut acc);
                }
                Ok(acc)
            })
            .collect::<Result<_>>()?;
        let mut out = vec![0.0; d];
        for p in &partials {
            axpy(1.0, p, &mut out);
        }
        for o in &mut out {
            *o *= scale;
        }
        Ok(out)
    }

    fn finish(&self, mut out: Vec<f64>, v: &[f64]) -> Vec<f64> {
        let shift = self.reg_curvature + self.damping;
        if shift != 0.0 {
            axpy(shift, v, &mut out);
        }
        out
    }

    fn effective_batch(&self, batch: Option<usize>) -> usize {
        let n = self.data.len();
        match batch {
            Some(b) => b.max(1),
            None if n <= FULL_BATCH_LIMIT => n,
            None => DEFAULT_BATCH,
        }
    }
}

impl LinearOperator for CurvatureOperator<'_> {
    fn dim(&self) -> usize {
        self.theta.len()
    }

    fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("matvec input", self.dim(), v.len())?;
        let n = self.data.len();
        let idx: Vec<usize> = (0..n).collect();
        let out = self.data_term(&idx, 1.0 / n as f64, v)?;
        Ok(self.finish(out, v))
    }

    /// Samples the batch uniformly with replacement; full batch when the
    /// requested size is at least `n`.
    fn stochastic_matvec(
        &self,
        v: &[f64],
        batch: Option<usize>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<f64>> {
        let n = self.data.len();
        let b = self.effective_batch(batch);
        if b >= n {
            return self.matvec(v);
        }
        check_len("matvec input", self.dim(), v.len())?;
        let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..n)).collect();
        let out = self.data_term(&idx, 1.0 / b as f64, v)?;
        Ok(self.finish(out, v))
    }
}

/// Factorization of a materialized `A + εI`, reusable across right-hand sides.
#[derive(Debug, Clone)]
pub struct DenseFactorization {
    matrix: DMatrix<f64>,
    damping: f64,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl DenseFactorization {
    /// Factorizes `A + εI` from a materialized (symmetrized) `A`.
    pub fn from_matrix(a: DMatrix<f64>, damping: f64) -> Result<Self> {
        let d = a.nrows();
        let mut m = (&a + a.transpose()) * 0.5;
        for i in 0..d {
            m[(i, i)] += damping;
        }
        if let Some(chol) = m.clone().cholesky() {
            return Ok(Self {
                matrix: m,
                damping,
                chol: Some(chol),
                lu: None,
            });
        }
        let lu = m.clone().lu();
        if !lu.is_invertible() {
            return Err(singular_report(&m, damping));
        }
        Ok(Self {
            matrix: m,
            damping,
            chol: None,
            lu: Some(lu),
        })
    }

    pub fn new(op: &dyn LinearOperator, damping: f64) -> Result<Self> {
        Self::from_matrix(op.to_dense()?, damping)
    }

    /// Like [`DenseFactorization::new`], but when the damped matrix cannot be
    /// solved to tolerance it retries once with `ε = 1e-3 · tr(A)/d` added.
    pub fn new_auto(op: &dyn LinearOperator, damping: f64) -> Result<Self> {
        let a = op.to_dense()?;
        let first = Self::from_matrix(a.clone(), damping).and_then(|f| {
            f.probe()?;
            Ok(f)
        });
        match first {
            Ok(f) => Ok(f),
            Err(Error::Numerical(_)) => {
                let extra = auto_damping(&a);
                Self::from_matrix(a, damping + extra)
            }
            Err(e) => Err(e),
        }
    }

    /// Total damping applied on top of the operator.
    pub fn damping(&self) -> f64 {
        self.damping
    }

    /// The symmetrized, damped matrix that was factorized.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    fn raw_solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match (&self.chol, &self.lu) {
            (Some(c), _) => c.solve(b),
            (None, Some(lu)) => lu.solve(b).unwrap_or_else(|| DVector::zeros(b.len())),
            _ => unreachable!("factorization present"),
        }
    }

    fn probe(&self) -> Result<()> {
        let d = self.matrix.nrows();
        let x = vec![1.0 / (d as f64).sqrt(); d];
        self.solve(&x).map(|_| ())
    }

    /// `(A + εI)⁻¹ x` with two steps of iterative refinement; fails when the
    /// residual exceeds `1e-8‖x‖`.
    pub fn solve(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("right-hand side", self.matrix.nrows(), x.len())?;
        let b = DVector::from_column_slice(x);
        let mut v = self.raw_solve(&b);
        for _ in 0..2 {
            let r = &b - &self.matrix * &v;
            v += self.raw_solve(&r);
        }
        let resid = (&b - &self.matrix * &v).norm();
        let tol = 1e-8 * b.norm();
        if !(resid <= tol) || v.iter().any(|t| !t.is_finite()) {
            let mut report = singular_report(&self.matrix, self.damping);
            if let Error::Numerical(msg) = &mut report {
                msg.push_str(&format!("; residual {resid:.3e} exceeds {tol:.3e}"));
            }
            return Err(report);
        }
        Ok(v.data.into())
    }
}

fn auto_damping(a: &DMatrix<f64>) -> f64 {
    let d = a.nrows().max(1) as f64;
    let tr = a.trace().abs();
    if tr > 0.0 {
        1e-3 * tr / d
    } else {
        1e-3
    }
}

fn singular_report(m: &DMatrix<f64>, damping: f64) -> Error {
    let (lo, hi) = sym_eigen_range(m);
    Error::Numerical(format!(
        "damped curvature matrix is singular or indefinite (damping {damping:.3e}, eigenvalues in [{lo:.3e}, {hi:.3e}], condition ≈ {:.3e}); increase --damping",
        if lo.abs() > 0.0 { hi.abs() / lo.abs() } else { f64::INFINITY }
    ))
}

/// `(A + εI)⁻¹ x` by dense factorization.
pub fn dense_solve(op: &dyn LinearOperator, x: &[f64], damping: f64) -> Result<Vec<f64>> {
    check_len("right-hand side", op.dim(), x.len())?;
    DenseFactorization::new(op, damping)?.solve(x)
}

/// Truncated Neumann series configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LissaConfig {
    /// Scale `σ`; convergence needs `σ λ_max(A) < 1`.
    pub sigma: f64,
    pub depth: usize,
    pub reps: usize,
    /// Mini-batch size per matvec; `None` picks full batch up to 4096 samples, else 512.
    pub batch: Option<usize>,
    pub seed: u64,
}

impl Default for LissaConfig {
    fn default() -> Self {
        Self {
            sigma: 1.0 / 500.0,
            depth: 2000,
            reps: 3,
            batch: None,
            seed: 0,
        }
    }
}

impl LissaConfig {
    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidInput(format!("LiSSA scale must be > 0, got {}", self.sigma)));
        }
        if self.depth == 0 || self.reps == 0 {
            return Err(Error::InvalidInput("LiSSA depth and repetitions must be ≥ 1".into()));
        }
        Ok(())
    }

    fn rep_seed(&self, rep: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(rep as u64 + 1)
    }
}

fn lissa_rep(
    op: &dyn LinearOperator,
    x: &[f64],
    cfg: &LissaConfig,
    rep: usize,
    observer: &mut dyn FnMut(usize, usize, &[f64]),
) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rep_seed(rep));
    let mut v = x.to_vec();
    for j in 1..=cfg.depth {
        let av = op.stochastic_matvec(&v, cfg.batch, &mut rng)?;
        for ((vi, xi), ai) in v.iter_mut().zip(x).zip(&av) {
            *vi = xi + *vi - cfg.sigma * ai;
        }
        let nv = norm(&v);
        if !(nv <= DIVERGENCE_NORM) {
            return Err(Error::Divergence {
                iteration: j,
                norm: nv,
            });
        }
        let est: Vec<f64> = v.iter().map(|t| cfg.sigma * t).collect();
        observer(rep, j, &est);
    }
    Ok(v.into_iter().map(|t| cfg.sigma * t).collect())
}

fn average(reps: Vec<Vec<f64>>) -> Vec<f64> {
    let r = reps.len() as f64;
    let mut out = vec![0.0; reps[0].len()];
    for v in &reps {
        axpy(1.0, v, &mut out);
    }
    out.iter_mut().for_each(|o| *o /= r);
    out
}

/// `A⁻¹ x ≈ σ v_N` with `v_0 = x`, `v_j = x + (I − σA) v_{j−1}`, averaged
/// over independent repetitions (run in parallel, summed in order).
pub fn lissa_solve(op: &dyn LinearOperator, x: &[f64], cfg: &LissaConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_len("right-hand side", op.dim(), x.len())?;
    let reps: Vec<Vec<f64>> = (0..cfg.reps)
        .into_par_iter()
        .map(|r| lissa_rep(op, x, cfg, r, &mut |_, _, _| {}))
        .collect::<Result<_>>()?;
    Ok(average(reps))
}

/// Sequential [`lissa_solve`] that reports `(rep, j, σ v_j)` after each iteration.
pub fn lissa_solve_observed(
    op: &dyn LinearOperator,
    x: &[f64],
    cfg: &LissaConfig,
    observer: &mut dyn FnMut(usize, usize, &[f64]),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_len("right-hand side", op.dim(), x.len())?;
    let reps: Vec<Vec<f64>> = (0..cfg.reps)
        .map(|r| lissa_rep(op, x, cfg, r, observer))
        .collect::<Result<_>>()?;
    Ok(average(reps))
}

/// Inverse-product strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "solver", rename_all = "lowercase")]
pub enum SolverConfig {
    Dense,
    Lissa(LissaConfig),
}

/// Solves `A v = x` for many right-hand sides with one solver.
pub enum InverseSolver<'a> {
    Dense(DenseFactorization),
    Lissa {
        op: &'a dyn LinearOperator,
        cfg: LissaConfig,
    },
}

impl<'a> InverseSolver<'a> {
    /// Dense solvers factorize once (with automatic extra damping if needed).
    pub fn new(op: &'a dyn LinearOperator, solver: &SolverConfig) -> Result<Self> {
        Ok(match solver {
            SolverConfig::Dense => InverseSolver::Dense(DenseFactorization::new_auto(op, 0.0)?),
            SolverConfig::Lissa(cfg) => InverseSolver::Lissa { op, cfg: *cfg },
        })
    }

    pub fn solve(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            InverseSolver::Dense(f) => f.solve(x),
            InverseSolver::Lissa { op, cfg } => lissa_solve(*op, x, cfg),
        }
    }

    /// Damping the dense path added on top of the operator (0 for LiSSA).
    pub fn extra_damping(&self) -> f64 {
        match self {
            InverseSolver::Dense(f) => f.damping(),
            InverseSolver::Lissa { .. } => 0.0,
        }
    }
}
