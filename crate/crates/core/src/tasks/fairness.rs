//! Fairness metrics on training data and influence-driven unlearning.
//!
//! The model output is reduced to a scalar per sample: the class-1
//! probability for categorical heads, the output itself for Gaussian heads.
//! Groups are `s ≤ 0.5` and `s > 0.5`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{check_len, Error, Result};
use crate::expfamily::{accuracy, mse, softmax, Head};
use crate::influence::Estimator;
use crate::linalg::axpy;
use crate::nn::Model;
use crate::objective::WeightVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FairnessMetric {
    DemographicParity,
    ChiSquare,
}

impl std::str::FromStr for FairnessMetric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dp" => Ok(FairnessMetric::DemographicParity),
            "chi2" => Ok(FairnessMetric::ChiSquare),
            other => Err(Error::Usage(format!("unknown fairness metric '{other}' (dp|chi2)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FairnessSpec {
    pub metric: FairnessMetric,
    /// Quantile bins for the χ² metric.
    pub bins: usize,
}

impl FairnessSpec {
    pub fn new(metric: FairnessMetric, bins: usize) -> Result<Self> {
        if bins < 2 {
            return Err(Error::InvalidInput(format!("bin count must be ≥ 2, got {bins}")));
        }
        Ok(Self { metric, bins })
    }
}

fn group_of(s: &Sample) -> Result<bool> {
    s.s.map(|v| v > 0.5)
        .ok_or_else(|| Error::InvalidInput("dataset has no sensitive attribute".into()))
}

/// Class-1 probability (categorical) or the scalar output (Gaussian).
pub fn reduce_output(head: &Head, f: &[f64]) -> f64 {
    match head {
        Head::Categorical { .. } => softmax(f)[1],
        Head::Gaussian => f[0],
    }
}

/// `∂ reduce / ∂f`.
fn reduce_cotangent(head: &Head, f: &[f64]) -> Vec<f64> {
    match head {
        Head::Categorical { .. } => {
            let p = softmax(f);
            let p1 = p[1];
            p.iter()
                .enumerate()
                .map(|(j, pj)| p1 * (if j == 1 { 1.0 } else { 0.0 } - pj))
                .collect()
        }
        Head::Gaussian => vec![1.0],
    }
}

/// Reduced outputs for every sample.
pub fn reduced_outputs(model: &Model, head: &Head, data: &Dataset, theta: &[f64]) -> Result<Vec<f64>> {
    check_len("model output vs head", head.dim(), model.output_dim())?;
    data.samples
        .par_iter()
        .map(|s| Ok(reduce_output(head, &model.forward(&s.x, theta)?)))
        .collect()
}

/// `Σ_i c_i ∇_θ reduce(f(x_i; θ))`, chunk partials summed in order.
fn weighted_output_grad(model: &Model, head: &Head, data: &Dataset, theta: &[f64], coef: &[f64]) -> Result<Vec<f64>> {
    let d = model.num_params();
    let idx: Vec<usize> = (0..data.len()).filter(|&i| coef[i] != 0.0).collect();
    let partials: Vec<Vec<f64>> = idx
        .par_chunks(64)
        .map(|chunk| {
            let mut acc = vec![0.0; d];
            for &i in chunk {
                let g = model.vjp_with(&data.samples[i].x, theta, |f| reduce_cotangent(head, f))?;
                axpy(coef[i], &g, &mut acc);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; d];
    for p in &partials {
        axpy(1.0, p, &mut out);
    }
    Ok(out)
}

/// `(mean over s=0, mean over s=1)` of the values.
fn group_means(values: &[f64], data: &Dataset) -> Result<(f64, f64, usize, usize)> {
    let (mut s0, mut s1, mut n0, mut n1) = (0.0, 0.0, 0usize, 0usize);
    for (v, s) in values.iter().zip(&data.samples) {
        if group_of(s)? {
            s1 += v;
            n1 += 1;
        } else {
            s0 += v;
            n0 += 1;
        }
    }
    if n0 == 0 || n1 == 0 {
        return Err(Error::InvalidInput("demographic parity needs both groups nonempty".into()));
    }
    Ok((s0 / n0 as f64, s1 / n1 as f64, n0, n1))
}

/// `|E[out | s=0] − E[out | s=1]|` from precomputed outputs.
pub fn dp_from_outputs(values: &[f64], data: &Dataset) -> Result<f64> {
    check_len("outputs", data.len(), values.len())?;
    let (m0, m1, _, _) = group_means(values, data)?;
    Ok((m0 - m1).abs())
}

pub fn dp_metric(model: &Model, head: &Head, data: &Dataset, theta: &[f64]) -> Result<f64> {
    dp_from_outputs(&reduced_outputs(model, head, data, theta)?, data)
}

/// `∇_θ` of the demographic-parity gap (the sign of the gap times the
/// difference of group-mean output gradients).
pub fn dp_gradient(model: &Model, head: &Head, data: &Dataset, theta: &[f64]) -> Result<Vec<f64>> {
    let values = reduced_outputs(model, head, data, theta)?;
    let (m0, m1, n0, n1) = group_means(&values, data)?;
    let sign = if m0 >= m1 { 1.0 } else { -1.0 };
    let coef: Vec<f64> = data
        .samples
        .iter()
        .map(|s| {
            Ok(if group_of(s)? {
                -sign / n1 as f64
            } else {
                sign / n0 as f64
            })
        })
        .collect::<Result<_>>()?;
    weighted_output_grad(model, head, data, theta, &coef)
}

/// A χ² value with a flag for degenerate (single-bin) outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chi2Value {
    pub value: f64,
    pub degenerate: bool,
}

/// Interior quantile edges `sorted[⌊j n / B⌋]`, `j = 1..B−1`, deduplicated.
fn quantile_edges(values: &[f64], bins: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let mut edges: Vec<f64> = (1..bins).map(|j| sorted[(j * n / bins).min(n - 1)]).collect();
    edges.dedup();
    // An edge at the minimum would leave the first bin empty.
    edges.retain(|e| *e > sorted[0]);
    edges
}

fn bin_of(edges: &[f64], v: f64) -> usize {
    edges.partition_point(|e| *e <= v)
}

/// Sensitive categories: binary attributes as-is, others quantile-binned.
fn sensitive_bins(s: &[f64], bins: usize) -> (Vec<usize>, usize) {
    if s.iter().all(|v| *v == 0.0 || *v == 1.0) {
        return (s.iter().map(|v| *v as usize).collect(), 2);
    }
    let edges = quantile_edges(s, bins);
    (s.iter().map(|v| bin_of(&edges, *v)).collect(), edges.len() + 1)
}

/// Discrete χ² between the joint histogram of (binned output, sensitive
/// category) and the product of its marginals.
pub fn chi2_from_values(outputs: &[f64], sensitive: &[f64], bins: usize) -> Result<Chi2Value> {
    check_len("sensitive attribute", outputs.len(), sensitive.len())?;
    if outputs.is_empty() {
        return Err(Error::InvalidInput("χ² of an empty sample".into()));
    }
    if bins < 2 {
        return Err(Error::InvalidInput(format!("bin count must be ≥ 2, got {bins}")));
    }
    let edges = quantile_edges(outputs, bins);
    if edges.is_empty() {
        return Ok(Chi2Value { value: 0.0, degenerate: true });
    }
    let a_bins = edges.len() + 1;
    let (s_cat, s_bins) = sensitive_bins(sensitive, bins);
    let n = outputs.len() as f64;
    let mut joint = vec![vec![0.0; s_bins]; a_bins];
    for (v, &c) in outputs.iter().zip(&s_cat) {
        joint[bin_of(&edges, *v)][c] += 1.0 / n;
    }
    let pa: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let pb: Vec<f64> = (0..s_bins).map(|b| joint.iter().map(|r| r[b]).sum()).collect();
    let mut chi2 = 0.0;
    for a in 0..a_bins {
        for b in 0..s_bins {
            let q = pa[a] * pb[b];
            if q > 0.0 {
                chi2 += (joint[a][b] - q).powi(2) / q;
            }
        }
    }
    Ok(Chi2Value { value: chi2, degenerate: false })
}

pub fn chi2_metric(model: &Model, head: &Head, data: &Dataset, theta: &[f64], bins: usize) -> Result<Chi2Value> {
    let outputs = reduced_outputs(model, head, data, theta)?;
    let s: Vec<f64> = data
        .samples
        .iter()
        .map(|s| s.s.ok_or_else(|| Error::InvalidInput("dataset has no sensitive attribute".into())))
        .collect::<Result<_>>()?;
    chi2_from_values(&outputs, &s, bins)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Gradient of a smoothed χ²: hard bin indicators are replaced by
/// differences of sigmoids of width `τ` (a tenth of the median bin width)
/// around the same quantile edges, which are held fixed.
pub fn chi2_gradient(model: &Model, head: &Head, data: &Dataset, theta: &[f64], bins: usize) -> Result<Vec<f64>> {
    let outputs = reduced_outputs(model, head, data, theta)?;
    let s: Vec<f64> = data
        .samples
        .iter()
        .map(|s| s.s.ok_or_else(|| Error::InvalidInput("dataset has no sensitive attribute".into())))
        .collect::<Result<_>>()?;
    let edges = quantile_edges(&outputs, bins);
    if edges.is_empty() {
        return Ok(vec![0.0; model.num_params()]);
    }
    let mut widths: Vec<f64> = edges.windows(2).map(|w| w[1] - w[0]).filter(|w| *w > 0.0).collect();
    widths.sort_by(f64::total_cmp);
    let tau = if widths.is_empty() {
        let lo = outputs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = outputs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (0.1 * (hi - lo) / bins as f64).max(1e-9)
    } else {
        0.1 * widths[widths.len() / 2]
    };
    let a_bins = edges.len() + 1;
    let (s_cat, s_bins) = sensitive_bins(&s, bins);
    let n = outputs.len() as f64;

    // Soft membership m_a(v) = σ((v − e_{a−1})/τ) − σ((v − e_a)/τ), open ends at ±∞.
    let membership = |v: f64| -> (Vec<f64>, Vec<f64>) {
        let mut m = vec![0.0; a_bins];
        let mut dm = vec![0.0; a_bins];
        for a in 0..a_bins {
            let (lo, dlo) = if a == 0 {
                (1.0, 0.0)
            } else {
                let z = sigmoid((v - edges[a - 1]) / tau);
                (z, z * (1.0 - z) / tau)
            };
            let (hi, dhi) = if a == a_bins - 1 {
                (0.0, 0.0)
            } else {
                let z = sigmoid((v - edges[a]) / tau);
                (z, z * (1.0 - z) / tau)
            };
            m[a] = lo - hi;
            dm[a] = dlo - dhi;
        }
        (m, dm)
    };
    let mut joint = vec![vec![0.0; s_bins]; a_bins];
    let mut dmem = Vec::with_capacity(outputs.len());
    for (v, &c) in outputs.iter().zip(&s_cat) {
        let (m, dm) = membership(*v);
        for a in 0..a_bins {
            joint[a][c] += m[a] / n;
        }
        dmem.push(dm);
    }
    let pa: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
    let pb: Vec<f64> = (0..s_bins).map(|b| joint.iter().map(|r| r[b]).sum()).collect();
    // χ² = Σ P_ab²/(P_a P_b) − 1; partial derivatives w.r.t. P_ab with P_a = Σ_b P_ab.
    let mut dchi = vec![vec![0.0; s_bins]; a_bins];
    for a in 0..a_bins {
        if pa[a] <= 0.0 {
            continue;
        }
        let row_term: f64 = (0..s_bins)
            .filter(|&b| pb[b] > 0.0)
            .map(|b| joint[a][b].powi(2) / (pa[a] * pa[a] * pb[b]))
            .sum();
        for b in 0..s_bins {
            if pb[b] > 0.0 {
                dchi[a][b] = 2.0 * joint[a][b] / (pa[a] * pb[b]) - row_term;
            }
        }
    }
    let coef: Vec<f64> = dmem
        .iter()
        .zip(&s_cat)
        .map(|(dm, &c)| (0..a_bins).map(|a| dm[a] * dchi[a][c]).sum::<f64>() / n)
        .collect();
    weighted_output_grad(model, head, data, theta, &coef)
}

/// Metric value and gradient at `θ`.
pub fn metric_value(spec: &FairnessSpec, model: &Model, head: &Head, data: &Dataset, theta: &[f64]) -> Result<f64> {
    match spec.metric {
        FairnessMetric::DemographicParity => dp_metric(model, head, data, theta),
        FairnessMetric::ChiSquare => Ok(chi2_metric(model, head, data, theta, spec.bins)?.value),
    }
}

pub fn metric_gradient(spec: &FairnessSpec, model: &Model, head: &Head, data: &Dataset, theta: &[f64]) -> Result<Vec<f64>> {
    match spec.metric {
        FairnessMetric::DemographicParity => dp_gradient(model, head, data, theta),
        FairnessMetric::ChiSquare => chi2_gradient(model, head, data, theta, spec.bins),
    }
}

/// Accuracy (categorical) or MSE (Gaussian).
pub fn performance(model: &Model, head: &Head, data: &Dataset, theta: &[f64]) -> Result<f64> {
    match head {
        Head::Categorical { .. } => accuracy(model, head, data, theta),
        Head::Gaussian => mse(model, data, theta),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessOutcome {
    /// Samples with strictly positive influence, in index order.
    pub selected: Vec<usize>,
    /// Per-sample influence on the metric; positive means the sample
    /// increases unfairness (its removal is predicted to lower the metric).
    pub influence: Vec<f64>,
    pub theta_after: Vec<f64>,
    pub metric_before: f64,
    pub metric_after: f64,
    pub perf_before: f64,
    pub perf_after: f64,
}

/// Scores every training sample by its linearized effect on the metric,
/// removes the ones with positive influence in a single leave-`K`-out
/// estimate and reports metric and performance before and after.
pub fn fairness_pipeline(est: &Estimator<'_>, spec: &FairnessSpec) -> Result<FairnessOutcome> {
    let (model, head, data, theta) = (est.model(), est.head(), est.data(), est.theta_hat());
    let metric_before = metric_value(spec, model, &head, data, theta)?;
    let perf_before = performance(model, &head, data, theta)?;
    let grad = metric_gradient(spec, model, &head, data, theta)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let influence: Vec<f64> = est
        .removal_effects(&grad, &all)?
        .into_iter()
        .map(|v| -v)
        .collect();
    let selected: Vec<usize> = influence
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(i, _)| i)
        .collect();
    let theta_after = est.estimate(&WeightVector::leave_k_out(data.len(), &selected)?)?;
    Ok(FairnessOutcome {
        metric_after: metric_value(spec, model, &head, data, &theta_after)?,
        perf_after: performance(model, &head, data, &theta_after)?,
        selected,
        influence,
        theta_after,
        metric_before,
        perf_before,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    fn groups(outputs: &[(f64, f64)]) -> (Vec<f64>, Dataset) {
        let samples = outputs
            .iter()
            .map(|&(_, s)| Sample { x: vec![0.0], y: 0.0, s: Some(s) })
            .collect();
        (outputs.iter().map(|o| o.0).collect(), Dataset::new(samples).unwrap())
    }

    #[test]
    fn dp_arithmetic() {
        let (v, d) = groups(&[(1.0, 0.0), (3.0, 0.0), (2.0, 1.0)]);
        assert_eq!(dp_from_outputs(&v, &d).unwrap(), 0.0);
        let (v, d) = groups(&[(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (1.0, 1.0)]);
        assert_eq!(dp_from_outputs(&v, &d).unwrap(), 0.5);
        let (v, d) = groups(&[(0.0, 0.0), (1.0, 0.0)]);
        assert!(dp_from_outputs(&v, &d).is_err());
    }

    #[test]
    fn chi2_arithmetic() {
        let s: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
        let c = chi2_from_values(&s, &s, 2).unwrap();
        assert!((c.value - 1.0).abs() < 1e-12 && !c.degenerate);
        let c = chi2_from_values(&vec![0.3; 100], &s, 10).unwrap();
        assert!(c.value == 0.0 && c.degenerate);
        // Joint equal to the product of marginals.
        let out = [0.0, 0.0, 1.0, 1.0];
        let sens = [0.0, 1.0, 0.0, 1.0];
        assert!(chi2_from_values(&out, &sens, 2).unwrap().value.abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = Model::new(Architecture::linear(3, 2, true)).unwrap();
        let head = Head::Categorical { classes: 2 };
        let data = crate::data::Synthetic::BiasedGroups { n: 200, d: 3, bias: 0.4, proxy_shift: 1.0 }
            .generate(3)
            .data;
        let theta = model.init_params(2);
        let g = dp_gradient(&model, &head, &data, &theta).unwrap();
        let eps = 1e-6;
        for j in 0..theta.len() {
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[j] += eps;
            tm[j] -= eps;
            let fd = (dp_metric(&model, &head, &data, &tp).unwrap() - dp_metric(&model, &head, &data, &tm).unwrap())
                / (2.0 * eps);
            assert!((fd - g[j]).abs() < 1e-7);
        }
    }
}
