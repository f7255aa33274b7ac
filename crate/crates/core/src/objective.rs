//! Weighted empirical risk `L(θ, w) = (1/n) Σ w_i ℓ(z_i; θ) + λ π(θ)`.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::Dataset;
use crate::error::{check_len, Error, Result};
use crate::expfamily::{loss_grad, sample_loss, Head};
use crate::nn::Model;

/// Penalty `λ π(θ)`: `L2` uses `π = ‖θ‖²`, `L1` uses `π = ‖θ‖₁`. Every
/// parameter, biases included, is penalized.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Regularizer {
    #[default]
    None,
    L2(f64),
    L1(f64),
}

impl Regularizer {
    pub fn lambda(&self) -> f64 {
        match *self {
            Regularizer::None => 0.0,
            Regularizer::L2(l) | Regularizer::L1(l) => l,
        }
    }

    /// `λ π(θ)`.
    pub fn value(&self, theta: &[f64]) -> f64 {
        match *self {
            Regularizer::None => 0.0,
            Regularizer::L2(l) => l * theta.iter().map(|t| t * t).sum::<f64>(),
            Regularizer::L1(l) => l * theta.iter().map(|t| t.abs()).sum::<f64>(),
        }
    }

    /// Twice differentiable penalties (`None`, `L2`).
    pub fn is_smooth(&self) -> bool {
        !matches!(self, Regularizer::L1(_))
    }

    /// Gradient of the smooth part: `2λθ` for `L2`, zero otherwise.
    pub fn smooth_grad(&self, theta: &[f64]) -> Vec<f64> {
        match *self {
            Regularizer::L2(l) => theta.iter().map(|t| 2.0 * l * t).collect(),
            _ => vec![0.0; theta.len()],
        }
    }

    /// Curvature of the smooth part, a multiple of the identity (`2λ` for `L2`).
    pub fn smooth_curvature(&self) -> f64 {
        match *self {
            Regularizer::L2(l) => 2.0 * l,
            _ => 0.0,
        }
    }
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regularizer::None => write!(f, "none"),
            Regularizer::L2(l) => write!(f, "l2:{l}"),
            Regularizer::L1(l) => write!(f, "l1:{l}"),
        }
    }
}

impl FromStr for Regularizer {
    type Err = Error;

    /// `none`, `l2:<λ>` or `l1:<λ>`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        if s == "none" {
            return Ok(Regularizer::None);
        }
        let (kind, lam) = s
            .split_once(':')
            .ok_or_else(|| Error::Usage(format!("regularizer '{s}' must be none, l2:<λ> or l1:<λ>")))?;
        let lam: f64 = lam
            .parse()
            .map_err(|_| Error::Usage(format!("'{lam}' is not a number")))?;
        if !(lam >= 0.0 && lam.is_finite()) {
            return Err(Error::Usage(format!("regularization strength must be ≥ 0, got {lam}")));
        }
        match kind {
            "l2" => Ok(Regularizer::L2(lam)),
            "l1" => Ok(Regularizer::L1(lam)),
            _ => Err(Error::Usage(format!("unknown regularizer '{kind}'"))),
        }
    }
}

impl Serialize for Regularizer {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Regularizer {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-sample weights `w ∈ ℝⁿ_{≥0}`; removal of a point sets its weight to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if let Some(i) = w.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidInput(format!("weight {i} must be finite and ≥ 0, got {}", w[i])));
        }
        Ok(Self(w))
    }

    pub fn all_ones(n: usize) -> Self {
        Self(vec![1.0; n])
    }

    pub fn leave_one_out(n: usize, i: usize) -> Result<Self> {
        Self::leave_k_out(n, &[i])
    }

    pub fn leave_k_out(n: usize, removed: &[usize]) -> Result<Self> {
        let mut w = vec![1.0; n];
        for &i in removed {
            if i >= n {
                return Err(Error::InvalidInput(format!("index {i} out of range for n = {n}")));
            }
            w[i] = 0.0;
        }
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Indices whose weight is exactly zero.
    pub fn removed(&self) -> Vec<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, w)| **w == 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn is_all_ones(&self) -> bool {
        self.0.iter().all(|w| *w == 1.0)
    }
}

/// `(1/n) Σ_{i ∈ idx} c_i ∇ℓ_i` summed in fixed index order.
fn weighted_grad_sum(
    model: &Model,
    head: &Head,
    data: &Dataset,
    theta: &[f64],
    coef: &[f64],
) -> Result<Vec<f64>> {
    let n = data.len();
    let active: Vec<usize> = (0..n).filter(|&i| coef[i] != 0.0).collect();
    let grads: Vec<Vec<f64>> = active
        .par_iter()
        .map(|&i| loss_grad(model, head, &data.samples[i], theta))
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; model.num_params()];
    for (g, &i) in grads.iter().zip(&active) {
        let c = coef[i] / n as f64;
        for (o, gv) in out.iter_mut().zip(g) {
            *o += c * gv;
        }
    }
    Ok(out)
}

/// Gradient of the smooth weighted data term `(1/n) Σ w_i ∇ℓ_i(θ)`.
pub fn weighted_loss_grad(
    model: &Model,
    head: &Head,
    data: &Dataset,
    theta: &[f64],
    w: &WeightVector,
) -> Result<Vec<f64>> {
    check_len("weight vector", data.len(), w.len())?;
    weighted_grad_sum(model, head, data, theta, w.as_slice())
}

/// `b(θ, w) = (1/n) Σ ∇ℓ(z_i; θ)(w_i − 1)`.
pub fn b_vector(
    model: &Model,
    head: &Head,
    data: &Dataset,
    theta: &[f64],
    w: &WeightVector,
) -> Result<Vec<f64>> {
    check_len("weight vector", data.len(), w.len())?;
    let coef: Vec<f64> = w.as_slice().iter().map(|wi| wi - 1.0).collect();
    weighted_grad_sum(model, head, data, theta, &coef)
}

/// `L(θ, w)`.
pub fn objective(
    model: &Model,
    head: &Head,
    data: &Dataset,
    theta: &[f64],
    w: &WeightVector,
    reg: &Regularizer,
) -> Result<f64> {
    check_len("weight vector", data.len(), w.len())?;
    let losses: Vec<f64> = data
        .samples
        .par_iter()
        .zip(w.as_slice().par_iter())
        .map(|(s, &wi)| if wi == 0.0 { Ok(0.0) } else { Ok(wi * sample_loss(model, head, s, theta)?) })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / data.len() as f64 + reg.value(theta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regularizer_parsing() {
        assert_eq!("none".parse::<Regularizer>().unwrap(), Regularizer::None);
        assert_eq!("l2:0.5".parse::<Regularizer>().unwrap(), Regularizer::L2(0.5));
        assert_eq!("L1:1e-3".parse::<Regularizer>().unwrap(), Regularizer::L1(1e-3));
        assert!("l2:-1".parse::<Regularizer>().is_err());
        assert!("l3:1".parse::<Regularizer>().is_err());
        let r = Regularizer::L2(0.25);
        assert_eq!(r.to_string().parse::<Regularizer>().unwrap(), r);
    }

    #[test]
    fn penalty_values() {
        assert_eq!(Regularizer::L2(0.5).value(&[1.0, -2.0]), 2.5);
        assert_eq!(Regularizer::L1(0.5).value(&[1.0, -2.0]), 1.5);
        assert_eq!(Regularizer::L2(0.5).smooth_grad(&[1.0, -2.0]), vec![1.0, -2.0]);
    }

    #[test]
    fn weight_constructors() {
        let w = WeightVector::leave_one_out(4, 2).unwrap();
        assert_eq!(w.as_slice(), &[1.0, 1.0, 0.0, 1.0]);
        assert_eq!(w.removed(), vec![2]);
        assert!(WeightVector::leave_one_out(4, 4).is_err());
        assert!(WeightVector::new(vec![1.0, -0.5]).is_err());
        assert!(WeightVector::all_ones(3).is_all_ones());
    }
}
