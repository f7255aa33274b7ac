//! Removal of training points, optionally followed by the Gaussian mechanism.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bounds::{noise_scale, BoundConstants};
use crate::error::{Error, Result};
use crate::expfamily::ebar_n;
use crate::influence::Estimator;
use crate::objective::WeightVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseRequest {
    pub epsilon: f64,
    pub delta: f64,
    pub constants: BoundConstants,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRequest {
    pub removed: Vec<usize>,
    pub noise: Option<NoiseRequest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlearnOutcome {
    pub theta: Vec<f64>,
    /// Variance `c` of the added noise `ζ ~ N(0, cI)`.
    pub noise_scale: Option<f64>,
}

/// `θ̃(w)` for `w` = leave-`K`-out, plus `√c · N(0, I)` when noise is requested.
pub fn unlearn(est: &Estimator<'_>, req: &UnlearnRequest) -> Result<UnlearnOutcome> {
    let n = est.data().len();
    let w = WeightVector::leave_k_out(n, &req.removed)?;
    let mut theta = est.estimate(&w)?;
    let noise_scale = match &req.noise {
        None => None,
        Some(noise) => {
            if !(noise.epsilon > 0.0) || !(noise.delta > 0.0 && noise.delta < 1.0) {
                return Err(Error::InvalidInput(format!(
                    "noise needs epsilon > 0 and delta in (0, 1), got ({}, {})",
                    noise.epsilon, noise.delta
                )));
            }
            let ebar = ebar_n(est.model(), &est.head(), est.data(), est.theta_hat())?;
            let c = noise_scale(&noise.constants, n as f64, ebar, noise.epsilon, noise.delta)?;
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
            let sd = c.sqrt();
            for t in &mut theta {
                let z: f64 = StandardNormal.sample(&mut rng);
                *t += sd * z;
            }
            Some(c)
        }
    };
    Ok(UnlearnOutcome { theta, noise_scale })
}
