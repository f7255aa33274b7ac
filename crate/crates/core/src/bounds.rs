//! Closed-form error bounds for the Fisher-based removal estimate and the
//! Gaussian-mechanism noise scale calibrated from them.
//!
//! All constants are user-supplied. Notation: `μ` strong convexity, `M`
//! Hessian Lipschitz constant, `C_f`/`C̃_f` Lipschitz constants of the
//! features and of their gradient, `Q` bound on the `f`-Hessian, `C_T1`/`C_T2`
//! Lipschitz constants of the inference objective and its gradient, `G` a
//! bound on all `g̃_i`, `B_sr` moment bounds of the removed-point gradients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub mu: Option<f64>,
    pub m: Option<f64>,
    pub c_f: Option<f64>,
    pub c_f_tilde: Option<f64>,
    pub q: Option<f64>,
    pub c_t1: Option<f64>,
    pub c_t2: Option<f64>,
    pub g: Option<f64>,
    pub l: Option<f64>,
    pub c: Option<f64>,
    /// `B_sr` keyed as `"s,r"`.
    #[serde(default)]
    pub b_sr: BTreeMap<String, f64>,
}

impl BoundConstants {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: BoundConstants = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("mu", self.mu),
            ("M", self.m),
            ("C_f", self.c_f),
            ("C_f_tilde", self.c_f_tilde),
            ("Q", self.q),
            ("C_T1", self.c_t1),
            ("C_T2", self.c_t2),
            ("G", self.g),
            ("L", self.l),
            ("C", self.c),
        ];
        for (name, v) in named {
            if let Some(v) = v {
                if !(v >= 0.0 && v.is_finite()) {
                    return Err(Error::InvalidInput(format!("constant {name} must be finite and ≥ 0, got {v}")));
                }
            }
        }
        for (k, v) in &self.b_sr {
            if !(*v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("B_{k} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }

    fn need(v: Option<f64>, name: &str) -> Result<f64> {
        v.ok_or_else(|| Error::InvalidInput(format!("bound constant {name} is required")))
    }

    fn mu_checked(&self) -> Result<f64> {
        let mu = Self::need(self.mu, "mu")?;
        if !(mu > 0.0) {
            return Err(Error::InvalidInput("strong convexity constant mu must be > 0".into()));
        }
        Ok(mu)
    }

    fn b(&self, s: u32, r: u32) -> Result<f64> {
        let key = format!("{s},{r}");
        self.b_sr
            .get(&key)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("bound constant B_{{{key}}} is required")))
    }
}

/// Which closed-form expression to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bound {
    /// Parameter error for one weight vector with gradient norm `g̃`.
    Lemma1,
    /// Objective error `C_T1·L + ½C_T2·L²` from a parameter error `L`.
    Thm1,
    /// Objective error of the linearized estimator.
    Thm1Linearized,
    /// Expected approximate-CV error.
    Cor1,
    /// Parameter error with the uniform gradient bound `G`.
    Cor2,
    /// Attribution (test-loss) error, plug-in.
    Cor3,
    /// Attribution error, linearized.
    Cor3Linearized,
    /// Error of `f` at a test point.
    Cor4,
    /// Gaussian-mechanism noise scale `c`.
    NoiseScale,
}

/// Inputs besides the constants.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoundInputs {
    pub n: usize,
    /// `g̃_i` (or the parameter error `L` for [`Bound::Thm1`]).
    pub g_tilde: f64,
    pub ebar_n: f64,
    /// Privacy parameters for [`Bound::NoiseScale`].
    pub epsilon: f64,
    pub delta: f64,
    /// Test-loss Lipschitz constant `C_ℓ` (attribution and test-point bounds).
    pub c_loss: f64,
}

fn lemma1(c: &BoundConstants, n: f64, g: f64, ebar: f64) -> Result<f64> {
    let mu = c.mu_checked()?;
    let q = BoundConstants::need(c.q, "Q")?;
    let cf = BoundConstants::need(c.c_f, "C_f")?;
    let m = BoundConstants::need(c.m, "M")?;
    let cft = BoundConstants::need(c.c_f_tilde, "C_f_tilde")?;
    Ok(2.0 * q * cf * cf * g / (n * n * mu * mu)
        + m * g * g / (n * n * mu.powi(3))
        + 2.0 * g * cft * ebar / (n * mu * mu))
}

/// Evaluates `which` literally.
pub fn evaluate(which: Bound, c: &BoundConstants, inp: &BoundInputs) -> Result<f64> {
    c.validate()?;
    if inp.n == 0 {
        return Err(Error::InvalidInput("bounds need n ≥ 1".into()));
    }
    let n = inp.n as f64;
    let need = BoundConstants::need;
    match which {
        Bound::Lemma1 => lemma1(c, n, inp.g_tilde, inp.ebar_n),
        Bound::Thm1 => {
            let l = inp.g_tilde;
            Ok(need(c.c_t1, "C_T1")? * l + 0.5 * need(c.c_t2, "C_T2")? * l * l)
        }
        Bound::Thm1Linearized => {
            let mu = c.mu_checked()?;
            let l = lemma1(c, n, inp.g_tilde, inp.ebar_n)?;
            let g = inp.g_tilde;
            Ok(need(c.c_t1, "C_T1")? * l + 2.0 * need(c.c_t2, "C_T2")? * g * g / (n * n * mu * mu))
        }
        Bound::Cor1 => {
            let mu = c.mu_checked()?;
            let m = need(c.m, "M")?;
            let cf = need(c.c_f, "C_f")?;
            let cft = need(c.c_f_tilde, "C_f_tilde")?;
            Ok(m * c.b(0, 3)? / (mu.powi(3) * n * n)
                + cf * cf * c.b(0, 2)? / (mu * mu * n * n)
                + cft * inp.ebar_n * c.b(0, 2)? / (mu * mu * n))
        }
        Bound::Cor2 => lemma1(c, n, need(c.g, "G")?, inp.ebar_n),
        Bound::Cor3 | Bound::Cor3Linearized => {
            let mu = c.mu_checked()?;
            let m = need(c.m, "M")?;
            let cf = need(c.c_f, "C_f")?;
            let cft = need(c.c_f_tilde, "C_f_tilde")?;
            let ct1 = need(c.c_t1, "C_T1")?;
            let cl = inp.c_loss;
            let base = cf * cf * ct1 * cl / (n * n * mu * mu)
                + m * ct1 * cl * cl / (n * n * mu.powi(3))
                + ct1 * cft * inp.ebar_n * cl / (n * mu * mu);
            if which == Bound::Cor3 {
                Ok(base)
            } else {
                Ok(base + need(c.c_t2, "C_T2")? * cl * cl / (n * n * mu * mu))
            }
        }
        Bound::Cor4 => {
            let mu = c.mu_checked()?;
            let m = need(c.m, "M")?;
            let cf = need(c.c_f, "C_f")?;
            let cft = need(c.c_f_tilde, "C_f_tilde")?;
            let cl = inp.c_loss;
            Ok(cf.powi(3) * cl / (n * n * mu * mu)
                + m * cf * cl * cl / (n * n * mu.powi(3))
                + cf * cft * cl * inp.ebar_n / (n * mu * mu))
        }
        Bound::NoiseScale => noise_scale(c, n, inp.ebar_n, inp.epsilon, inp.delta),
    }
}

/// `c = cor2 · √(2 ln(5/(4δ))) / ε`.
pub fn noise_scale(c: &BoundConstants, n: f64, ebar: f64, epsilon: f64, delta: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidInput(format!("epsilon must be > 0, got {epsilon}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidInput(format!("delta must be in (0, 1), got {delta}")));
    }
    let g = BoundConstants::need(c.g, "G")?;
    Ok(lemma1(c, n, g, ebar)? * (2.0 * (5.0 / (4.0 * delta)).ln()).sqrt() / epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit() -> BoundConstants {
        BoundConstants {
            mu: Some(1.0),
            m: Some(1.0),
            c_f: Some(1.0),
            c_f_tilde: Some(1.0),
            q: Some(1.0),
            c_t1: Some(2.0),
            c_t2: Some(4.0),
            g: Some(1.0),
            ..Default::default()
        }
    }

    #[test]
    fn parameter_bound_arithmetic() {
        let inp = BoundInputs { n: 10, g_tilde: 1.0, ebar_n: 1.0, ..Default::default() };
        assert!((evaluate(Bound::Lemma1, &unit(), &inp).unwrap() - 0.23).abs() < 1e-15);
        let quad = BoundConstants { m: Some(0.0), ..unit() };
        let inp0 = BoundInputs { ebar_n: 0.0, ..inp };
        assert!((evaluate(Bound::Lemma1, &quad, &inp0).unwrap() - 0.02).abs() < 1e-15);
    }

    #[test]
    fn objective_bound_from_parameter_error() {
        let inp = BoundInputs { n: 1, g_tilde: 0.5, ..Default::default() };
        assert_eq!(evaluate(Bound::Thm1, &unit(), &inp).unwrap(), 2.0 * 0.5 + 0.5 * 4.0 * 0.25);
    }

    #[test]
    fn noise_scale_arithmetic() {
        let inp = BoundInputs { n: 10, ebar_n: 1.0, epsilon: 1.0, delta: 0.05, ..Default::default() };
        let c = evaluate(Bound::NoiseScale, &unit(), &inp).unwrap();
        assert!((c - 0.23 * (2.0 * 25f64.ln()).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn invalid_constants() {
        let inp = BoundInputs { n: 10, g_tilde: 1.0, ..Default::default() };
        let zero_mu = BoundConstants { mu: Some(0.0), ..unit() };
        assert!(evaluate(Bound::Lemma1, &zero_mu, &inp).is_err());
        let missing = BoundConstants { q: None, ..unit() };
        assert!(evaluate(Bound::Lemma1, &missing, &inp).is_err());
        assert!(evaluate(Bound::Cor1, &unit(), &inp).is_err());
        let neg = BoundConstants { m: Some(-1.0), ..unit() };
        assert!(evaluate(Bound::Lemma1, &neg, &inp).is_err());
    }

    #[test]
    fn json_constants() {
        let c = BoundConstants::from_json(r#"{"mu":0.5,"q":1,"b_sr":{"0,2":3.0}}"#).unwrap();
        assert_eq!(c.mu, Some(0.5));
        assert_eq!(c.b(0, 2).unwrap(), 3.0);
    }
}
