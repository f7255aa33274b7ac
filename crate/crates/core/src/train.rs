//! Mini-batch AdamW training.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_len, Error, Result};
use crate::expfamily::{loss_grad, mean_loss, Head};
use crate::linalg::axpy;
use crate::nn::{Model, ParamVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Decoupled weight decay `λ_wd`.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 100,
            batch_size: 100,
            weight_decay: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidInput(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidInput("epochs must be ≥ 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be ≥ 1".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidInput(format!("weight decay must be ≥ 0, got {}", self.weight_decay)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidInput(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidInput("eps must be > 0".into()));
        }
        Ok(())
    }
}

/// Adam moment state.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: TrainConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(cfg: TrainConfig, dim: usize) -> Self {
        Self { cfg, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }

    /// One step: decay `θ ← θ(1 − lr·λ_wd)`, then the bias-corrected Adam update.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        let c = &self.cfg;
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let decay = 1.0 - c.lr * c.weight_decay;
        for j in 0..theta.len() {
            self.m[j] = c.beta1 * self.m[j] + (1.0 - c.beta1) * grad[j];
            self.v[j] = c.beta2 * self.v[j] + (1.0 - c.beta2) * grad[j] * grad[j];
            let m_hat = self.m[j] / bc1;
            let v_hat = self.v[j] / bc2;
            theta[j] = theta[j] * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub theta: Vec<f64>,
    /// Mean training loss before training and after every epoch.
    pub loss_curve: Vec<f64>,
}

/// Trains from `init` (or a seeded initialization when `None`).
///
/// Single-threaded; batch order comes from a ChaCha8 stream seeded by `cfg.seed`.
pub fn train(model: &Model, head: &Head, data: &Dataset, cfg: &TrainConfig, init: Option<&[f64]>) -> Result<TrainOutcome> {
    train_with(model, head, data, cfg, init, |_, _| {})
}

/// As [`train`], calling `on_epoch(epoch, θ)` after each epoch (1-based).
pub fn train_with<F>(
    model: &Model,
    head: &Head,
    data: &Dataset,
    cfg: &TrainConfig,
    init: Option<&[f64]>,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &[f64]),
{
    cfg.validate()?;
    head.check_dataset(data)?;
    check_len("model output vs head", head.dim(), model.output_dim())?;
    if data.is_empty() {
        return Err(Error::InvalidInput("cannot train on an empty dataset".into()));
    }
    let mut theta = match init {
        Some(t) => ParamVector::new(t.to_vec())?.into_inner(),
        None => model.init_params(cfg.seed).into_inner(),
    };
    check_len("initial parameters", model.num_params(), theta.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(*cfg, theta.len());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut loss_curve = vec![mean_loss(model, head, data, &theta, None)?];
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut g = vec![0.0; theta.len()];
            for &i in batch {
                let gi = loss_grad(model, head, &data.samples[i], &theta)?;
                axpy(1.0 / batch.len() as f64, &gi, &mut g);
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::TrainingDiverged { epoch });
            }
            opt.step(&mut theta, &g);
        }
        let loss = mean_loss(model, head, data, &theta, None)?;
        if !loss.is_finite() || theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::TrainingDiverged { epoch });
        }
        loss_curve.push(loss);
        on_epoch(epoch, &theta);
    }
    Ok(TrainOutcome { theta, loss_curve })
}
