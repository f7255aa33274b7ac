//! Dense feed-forward feature maps `f(x; θ)` with hand-derived differentiation.
//!
//! A [`Model`] is a stack of affine layers, each followed by an element-wise
//! activation. All parameters live in one flat [`ParamVector`] so curvature
//! operators can work in a single coordinate system. Per layer the layout is
//! the row-major weight matrix `(out, in)` followed by the bias (if present).
//!
//! Three differentiation primitives are provided:
//!
//! - [`Model::jvp`]: one forward-mode pass, `J a`.
//! - [`Model::vjp`]: one reverse-mode pass, `Jᵀ u`.
//! - [`Model::loss_hvp`]: reverse-over-reverse Hessian-vector product of a
//!   loss on top of the outputs (two reverse passes).
//!
//! Every call is recorded in the model's [`PassCounter`].
//!
//! SELU uses the standard constants `α = 1.6732632423543772` and
//! `λ = 1.0507009873554805`. The derivative of ReLU at 0 is taken as 0, and
//! SELU's derivative at 0 uses the negative branch.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
pub const SELU_SCALE: f64 = 1.050_700_987_355_480_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Selu,
}

impl Activation {
    #[inline]
    pub fn value(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Selu => {
                if z > 0.0 {
                    SELU_SCALE * z
                } else {
                    SELU_SCALE * SELU_ALPHA * z.exp_m1()
                }
            }
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Selu => {
                if z > 0.0 {
                    SELU_SCALE
                } else {
                    SELU_SCALE * SELU_ALPHA * z.exp()
                }
            }
        }
    }

    #[inline]
    pub fn second_derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity | Activation::Relu => 0.0,
            Activation::Selu => {
                if z > 0.0 {
                    0.0
                } else {
                    SELU_SCALE * SELU_ALPHA * z.exp()
                }
            }
        }
    }
}

fn default_bias() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(rename = "in")]
    pub input: usize,
    #[serde(rename = "out")]
    pub output: usize,
    pub act: Activation,
    #[serde(default = "default_bias")]
    pub bias: bool,
}

/// Architecture descriptor, serialized as
/// `{"layers":[{"in":14,"out":1000,"act":"selu"}, ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Single affine layer with identity activation.
    pub fn linear(input: usize, output: usize, bias: bool) -> Self {
        Self {
            layers: vec![LayerSpec {
                input,
                output,
                act: Activation::Identity,
                bias,
            }],
        }
    }

    /// MLP with the given widths (`[in, h1, ..., out]`), `hidden_act` on the
    /// hidden layers and identity on the output layer. All layers have biases.
    pub fn mlp(widths: &[usize], hidden_act: Activation) -> Self {
        let n = widths.len().saturating_sub(1);
        let layers = (0..n)
            .map(|l| LayerSpec {
                input: widths[l],
                output: widths[l + 1],
                act: if l + 1 == n {
                    Activation::Identity
                } else {
                    hidden_act
                },
                bias: true,
            })
            .collect();
        Self { layers }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let arch: Architecture = serde_json::from_str(s)?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("architecture serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidInput("architecture has no layers".into()));
        }
        for (l, spec) in self.layers.iter().enumerate() {
            if spec.input == 0 || spec.output == 0 {
                return Err(Error::InvalidInput(format!("layer {l} has a zero dimension")));
            }
            if l > 0 && self.layers[l - 1].output != spec.input {
                return Err(Error::InvalidInput(format!(
                    "layer {l} expects {} inputs but the previous layer produces {}",
                    spec.input,
                    self.layers[l - 1].output
                )));
            }
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|s| s.input * s.output + if s.bias { s.output } else { 0 })
            .sum()
    }
}

/// Monotone counters of differentiation passes.
#[derive(Debug, Default)]
pub struct PassCounter {
    forward_mode: AtomicU64,
    reverse_mode: AtomicU64,
    plain_forward: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounts {
    #[serde(rename = "fwd")]
    pub forward_mode: u64,
    #[serde(rename = "rev")]
    pub reverse_mode: u64,
    #[serde(rename = "eval")]
    pub plain_forward: u64,
}

impl std::ops::Sub for PassCounts {
    type Output = PassCounts;
    fn sub(self, rhs: Self) -> Self {
        PassCounts {
            forward_mode: self.forward_mode - rhs.forward_mode,
            reverse_mode: self.reverse_mode - rhs.reverse_mode,
            plain_forward: self.plain_forward - rhs.plain_forward,
        }
    }
}

impl PassCounter {
    pub fn snapshot(&self) -> PassCounts {
        PassCounts {
            forward_mode: self.forward_mode.load(Ordering::Relaxed),
            reverse_mode: self.reverse_mode.load(Ordering::Relaxed),
            plain_forward: self.plain_forward.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.forward_mode.store(0, Ordering::Relaxed);
        self.reverse_mode.store(0, Ordering::Relaxed);
        self.plain_forward.store(0, Ordering::Relaxed);
    }

    /// Adds counts gathered elsewhere (e.g. a per-thread counter).
    pub fn merge(&self, counts: PassCounts) {
        self.forward_mode
            .fetch_add(counts.forward_mode, Ordering::Relaxed);
        self.reverse_mode
            .fetch_add(counts.reverse_mode, Ordering::Relaxed);
        self.plain_forward
            .fetch_add(counts.plain_forward, Ordering::Relaxed);
    }

    fn add_forward_mode(&self, k: u64) {
        self.forward_mode.fetch_add(k, Ordering::Relaxed);
    }

    fn add_reverse_mode(&self, k: u64) {
        self.reverse_mode.fetch_add(k, Ordering::Relaxed);
    }

    fn add_plain(&self) {
        self.plain_forward.fetch_add(1, Ordering::Relaxed);
    }
}

/// Flat parameter vector `θ` of length `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "parameter {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Structured parameters of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// Row-major `(out, in)`.
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

/// A loss attached to the model outputs, used by [`Model::loss_hvp`].
pub trait OutputLoss {
    /// `∂ℓ/∂f`
    fn grad_f(&self, f: &[f64]) -> Vec<f64>;
    /// `(∂²ℓ/∂f²) u`
    fn hess_f_apply(&self, f: &[f64], u: &[f64]) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    spec: LayerSpec,
    w_off: usize,
    b_off: Option<usize>,
}

struct Trace {
    /// Pre-activations `z_l`, one per layer.
    pre: Vec<Vec<f64>>,
    /// Post-activations; `post[0]` is the input, `post[l]` the output of layer `l`.
    post: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Model {
    arch: Architecture,
    layout: Vec<LayerLayout>,
    num_params: usize,
    counter: Arc<PassCounter>,
}

impl Model {
    pub fn new(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let mut layout = Vec::with_capacity(arch.layers.len());
        let mut off = 0;
        for spec in &arch.layers {
            let w_off = off;
            off += spec.input * spec.output;
            let b_off = if spec.bias {
                let b = off;
                off += spec.output;
                Some(b)
            } else {
                None
            };
            layout.push(LayerLayout {
                spec: *spec,
                w_off,
                b_off,
            });
        }
        Ok(Self {
            arch,
            layout,
            num_params: off,
            counter: Arc::new(PassCounter::default()),
        })
    }

    /// Same architecture, sharing `counter`.
    pub fn with_counter(mut self, counter: Arc<PassCounter>) -> Self {
        self.counter = counter;
        self
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn counter(&self) -> &PassCounter {
        &self.counter
    }

    pub fn counter_handle(&self) -> Arc<PassCounter> {
        Arc::clone(&self.counter)
    }

    pub fn input_dim(&self) -> usize {
        self.arch.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.arch.layers.last().map(|s| s.output).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    /// True when `f` is affine in `θ` (one identity layer).
    pub fn is_linear(&self) -> bool {
        self.layout.len() == 1 && self.layout[0].spec.act == Activation::Identity
    }

    /// LeCun-normal weights (std `1/sqrt(in)`), zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = vec![0.0; self.num_params];
        for lay in &self.layout {
            let std = 1.0 / (lay.spec.input as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            for w in &mut theta[lay.w_off..lay.w_off + lay.spec.input * lay.spec.output] {
                *w = normal.sample(&mut rng);
            }
        }
        ParamVector(theta)
    }

    pub fn flatten(&self, layers: &[LayerParams]) -> Result<ParamVector> {
        check_len("layer count", self.layout.len(), layers.len())?;
        let mut out = Vec::with_capacity(self.num_params);
        for (lay, p) in self.layout.iter().zip(layers) {
            check_len("layer weights", lay.spec.input * lay.spec.output, p.weights.len())?;
            out.extend_from_slice(&p.weights);
            match (&p.bias, lay.spec.bias) {
                (Some(b), true) => {
                    check_len("layer bias", lay.spec.output, b.len())?;
                    out.extend_from_slice(b);
                }
                (None, false) => {}
                (Some(_), false) => {
                    return Err(Error::InvalidInput("bias given for a bias-free layer".into()))
                }
                (None, true) => return Err(Error::InvalidInput("missing layer bias".into())),
            }
        }
        ParamVector::new(out)
    }

    pub fn unflatten(&self, theta: &ParamVector) -> Result<Vec<LayerParams>> {
        check_len("parameter vector", self.num_params, theta.len())?;
        Ok(self
            .layout
            .iter()
            .map(|lay| {
                let nw = lay.spec.input * lay.spec.output;
                LayerParams {
                    weights: theta[lay.w_off..lay.w_off + nw].to_vec(),
                    bias: lay
                        .b_off
                        .map(|b| theta[b..b + lay.spec.output].to_vec()),
                }
            })
            .collect())
    }

    fn check_inputs(&self, x: &[f64], theta: &[f64]) -> Result<()> {
        check_len("covariate", self.input_dim(), x.len())?;
        check_len("parameter vector", self.num_params, theta.len())
    }

    fn trace(&self, x: &[f64], theta: &[f64]) -> Trace {
        let mut pre = Vec::with_capacity(self.layout.len());
        let mut post = Vec::with_capacity(self.layout.len() + 1);
        post.push(x.to_vec());
        for lay in &self.layout {
            let a = post.last().expect("input present");
            let (n_in, n_out) = (lay.spec.input, lay.spec.output);
            let w = &theta[lay.w_off..lay.w_off + n_in * n_out];
            let mut z = match lay.b_off {
                Some(b) => theta[b..b + n_out].to_vec(),
                None => vec![0.0; n_out],
            };
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[o * n_in..(o + 1) * n_in];
                *zo += row.iter().zip(a).map(|(wi, ai)| wi * ai).sum::<f64>();
            }
            let act = lay.spec.act;
            let out: Vec<f64> = z.iter().map(|&v| act.value(v)).collect();
            pre.push(z);
            post.push(out);
        }
        Trace { pre, post }
    }

    /// `f(x; θ)`.
    pub fn forward(&self, x: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(x, theta)?;
        self.counter.add_plain();
        let mut t = self.trace(x, theta);
        Ok(t.post.pop().expect("output present"))
    }

    /// `J a` where `J = ∂f/∂θ`; one forward-mode pass.
    pub fn jvp(&self, x: &[f64], theta: &[f64], a: &[f64]) -> Result<Vec<f64>> {
        Ok(self.jvp_with_value(x, theta, a)?.1)
    }

    /// Forward-mode pass returning `(f, J a)`.
    pub fn jvp_with_value(
        &self,
        x: &[f64],
        theta: &[f64],
        a: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_inputs(x, theta)?;
        check_len("tangent direction", self.num_params, a.len())?;
        self.counter.add_forward_mode(1);

        let mut val = x.to_vec();
        let mut tan = vec![0.0; x.len()];
        for lay in &self.layout {
            let (n_in, n_out) = (lay.spec.input, lay.spec.output);
            let w = &theta[lay.w_off..lay.w_off + n_in * n_out];
            let dw = &a[lay.w_off..lay.w_off + n_in * n_out];
            let mut z = vec![0.0; n_out];
            let mut tz = vec![0.0; n_out];
            if let Some(b) = lay.b_off {
                z.copy_from_slice(&theta[b..b + n_out]);
                tz.copy_from_slice(&a[b..b + n_out]);
            }
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let drow = &dw[o * n_in..(o + 1) * n_in];
                let mut zs = 0.0;
                let mut ts = 0.0;
                for i in 0..n_in {
                    zs += row[i] * val[i];
                    ts += drow[i] * val[i] + row[i] * tan[i];
                }
                z[o] += zs;
                tz[o] += ts;
            }
            let act = lay.spec.act;
            val = z.iter().map(|&v| act.value(v)).collect();
            tan = z
                .iter()
                .zip(&tz)
                .map(|(&zv, &t)| act.derivative(zv) * t)
                .collect();
        }
        Ok((val, tan))
    }

    /// `Jᵀ u`; one reverse-mode pass.
    pub fn vjp(&self, x: &[f64], theta: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_len("output cotangent", self.output_dim(), u.len())?;
        self.vjp_with(x, theta, |_| u.to_vec())
    }

    /// One reverse-mode pass where the output cotangent is computed from the
    /// primal output `f`.
    pub fn vjp_with<F>(&self, x: &[f64], theta: &[f64], cotangent: F) -> Result<Vec<f64>>
    where
        F: FnOnce(&[f64]) -> Vec<f64>,
    {
        self.check_inputs(x, theta)?;
        let t = self.trace(x, theta);
        let u = cotangent(t.post.last().expect("output present"));
        check_len("output cotangent", self.output_dim(), u.len())?;
        self.counter.add_reverse_mode(1);

        let mut grad = vec![0.0; self.num_params];
        let mut g = u;
        for (l, lay) in self.layout.iter().enumerate().rev() {
            let (n_in, n_out) = (lay.spec.input, lay.spec.output);
            let act = lay.spec.act;
            let delta: Vec<f64> = g
                .iter()
                .zip(&t.pre[l])
                .map(|(gv, &z)| gv * act.derivative(z))
                .collect();
            let a_prev = &t.post[l];
            for o in 0..n_out {
                let d = delta[o];
                let gw = &mut grad[lay.w_off + o * n_in..lay.w_off + (o + 1) * n_in];
                for (gwi, ai) in gw.iter_mut().zip(a_prev) {
                    *gwi = d * ai;
                }
            }
            if let Some(b) = lay.b_off {
                grad[b..b + n_out].copy_from_slice(&delta);
            }
            if l > 0 {
                let w = &theta[lay.w_off..lay.w_off + n_in * n_out];
                let mut next = vec![0.0; n_in];
                for o in 0..n_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    for (nv, wv) in next.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *nv += wv * d;
                    }
                }
                g = next;
            }
        }
        Ok(grad)
    }

    /// `∇²_θ ℓ(f(x; θ)) v` by reverse-over-reverse differentiation.
    ///
    /// The first reverse pass computes `∇_θ ℓ` and keeps its intermediates;
    /// the second differentiates `⟨∇_θ ℓ, v⟩` back through that backward
    /// graph and then through the forward graph. Counts two reverse passes.
    pub fn loss_hvp(
        &self,
        x: &[f64],
        theta: &[f64],
        loss: &dyn OutputLoss,
        v: &[f64],
    ) -> Result<Vec<f64>> {
        self.check_inputs(x, theta)?;
        check_len("HVP direction", self.num_params, v.len())?;
        self.counter.add_reverse_mode(2);

        let t = self.trace(x, theta);
        let n_layers = self.layout.len();
        let f = t.post[n_layers].clone();

        // First reverse pass: g[l] = ∂ℓ/∂a_l, delta[l] = ∂ℓ/∂z_l (0-based layer index).
        let mut g: Vec<Vec<f64>> = vec![Vec::new(); n_layers + 1];
        let mut delta: Vec<Vec<f64>> = vec![Vec::new(); n_layers];
        g[n_layers] = loss.grad_f(&f);
        for (l, lay) in self.layout.iter().enumerate().rev() {
            let (n_in, n_out) = (lay.spec.input, lay.spec.output);
            let act = lay.spec.act;
            let d: Vec<f64> = g[l + 1]
                .iter()
                .zip(&t.pre[l])
                .map(|(gv, &z)| gv * act.derivative(z))
                .collect();
            if l > 0 {
                let w = &theta[lay.w_off..lay.w_off + n_in * n_out];
                let mut prev = vec![0.0; n_in];
                for o in 0..n_out {
                    for (pv, wv) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *pv += wv * d[o];
                    }
                }
                g[l] = prev;
            }
            delta[l] = d;
        }

        // Second reverse pass, over the backward graph (layer order 0..L).
        let mut out = vec![0.0; self.num_params];
        let mut bar_post: Vec<Vec<f64>> = t.post.iter().map(|a| vec![0.0; a.len()]).collect();
        let mut bar_pre: Vec<Vec<f64>> = t.pre.iter().map(|z| vec![0.0; z.len()]).collect();
        let mut bar_g_prev = vec![0.0; self.input_dim()];
        for (l, lay) in self.layout.iter().enumerate() {
            let (n_in, n_out) = (lay.spec.input, lay.spec.output);
            let act = lay.spec.act;
            let w = &theta[lay.w_off..lay.w_off + n_in * n_out];
            let vw = &v[lay.w_off..lay.w_off + n_in * n_out];
            let a_prev = &t.post[l];

            // bar delta = V_W a_prev + V_b + W bar_g_prev
            let mut bar_delta = match lay.b_off {
                Some(b) => v[b..b + n_out].to_vec(),
                None => vec![0.0; n_out],
            };
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let vrow = &vw[o * n_in..(o + 1) * n_in];
                let mut s = 0.0;
                for i in 0..n_in {
                    s += vrow[i] * a_prev[i] + row[i] * bar_g_prev[i];
                }
                bar_delta[o] += s;
            }
            // g_prev = Wᵀ delta contributes delta ⊗ bar_g_prev to bar W;
            // the objective term deltaᵀ V_W a_prev contributes V_Wᵀ delta to bar a_prev.
            if l > 0 {
                for o in 0..n_out {
                    let d = delta[l][o];
                    let ow = &mut out[lay.w_off + o * n_in..lay.w_off + (o + 1) * n_in];
                    for (owi, bg) in ow.iter_mut().zip(&bar_g_prev) {
                        *owi += d * bg;
                    }
                    let vrow = &vw[o * n_in..(o + 1) * n_in];
                    for (ba, vv) in bar_post[l].iter_mut().zip(vrow) {
                        *ba += vv * d;
                    }
                }
            }
            // delta = g ⊙ σ'(z)
            let mut bar_g = vec![0.0; n_out];
            for o in 0..n_out {
                let z = t.pre[l][o];
                bar_g[o] = bar_delta[o] * act.derivative(z);
                bar_pre[l][o] += bar_delta[o] * g[l + 1][o] * act.second_derivative(z);
            }
            bar_g_prev = bar_g;
        }
        // g_L = ∂ℓ/∂f depends on f through the output-loss curvature.
        let hf = loss.hess_f_apply(&f, &bar_g_prev);
        for (b, h) in bar_post[n_layers].iter_mut().zip(&hf) {
            *b += h;
        }

        // Continue the second pass back through the forward graph.
        for (l, lay) in self.layout.iter().enumerate().rev() {
            let (n_in, n_out) = (lay.spec.input, lay.spec.output);
            let act = lay.spec.act;
            let w = &theta[lay.w_off..lay.w_off + n_in * n_out];
            let bz: Vec<f64> = (0..n_out)
                .map(|o| bar_pre[l][o] + bar_post[l + 1][o] * act.derivative(t.pre[l][o]))
                .collect();
            let a_prev = &t.post[l];
            for o in 0..n_out {
                let ow = &mut out[lay.w_off + o * n_in..lay.w_off + (o + 1) * n_in];
                for (owi, ai) in ow.iter_mut().zip(a_prev) {
                    *owi += bz[o] * ai;
                }
            }
            if let Some(b) = lay.b_off {
                for (ob, bzv) in out[b..b + n_out].iter_mut().zip(&bz) {
                    *ob += bzv;
                }
            }
            if l > 0 {
                for o in 0..n_out {
                    for (ba, wv) in bar_post[l].iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *ba += wv * bz[o];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Full `k × d` Jacobian built from `k` reverse passes (row `o` is `∇_θ f_o`).
    pub fn jacobian(&self, x: &[f64], theta: &[f64]) -> Result<Vec<Vec<f64>>> {
        let k = self.output_dim();
        (0..k)
            .map(|o| {
                let mut e = vec![0.0; k];
                e[o] = 1.0;
                self.vjp(x, theta, &e)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;
    use rand::Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn selu_net() -> Model {
        Model::new(Architecture::mlp(&[3, 5, 4, 2], Activation::Selu)).unwrap()
    }

    #[test]
    fn linear_identity_map() {
        let m = Model::new(Architecture::linear(2, 2, true)).unwrap();
        let theta = m
            .flatten(&[LayerParams {
                weights: vec![1.0, 0.0, 0.0, 1.0],
                bias: Some(vec![0.0, 0.0]),
            }])
            .unwrap();
        assert_eq!(m.forward(&[2.0, 3.0], &theta).unwrap(), vec![2.0, 3.0]);
    }

    #[test]
    fn relu_positive_branch() {
        let arch = Architecture {
            layers: vec![
                LayerSpec { input: 1, output: 1, act: Activation::Relu, bias: true },
                LayerSpec { input: 1, output: 1, act: Activation::Identity, bias: true },
            ],
        };
        let m = Model::new(arch).unwrap();
        // W1=[[1]], b1=0, W2=[[2]], b2=0
        let theta = [1.0, 0.0, 2.0, 0.0];
        assert_eq!(m.forward(&[1.0], &theta).unwrap(), vec![2.0]);
    }

    #[test]
    fn selu_forward_matches_straight_line_evaluation() {
        let m = selu_net();
        let theta = m.init_params(7);
        let x = [0.3, -1.2, 0.8];
        // Independent straight-line evaluation with explicit constants.
        let selu = |z: f64| {
            if z > 0.0 {
                1.0507009873554805 * z
            } else {
                1.0507009873554805 * 1.6732632423543772 * (z.exp() - 1.0)
            }
        };
        let widths = [3usize, 5, 4, 2];
        let mut a = x.to_vec();
        let mut off = 0;
        for l in 0..3 {
            let (ni, no) = (widths[l], widths[l + 1]);
            let mut z = vec![0.0; no];
            for o in 0..no {
                for i in 0..ni {
                    z[o] += theta[off + o * ni + i] * a[i];
                }
            }
            off += ni * no;
            for o in 0..no {
                z[o] += theta[off + o];
            }
            off += no;
            a = if l < 2 { z.into_iter().map(selu).collect() } else { z };
        }
        let f = m.forward(&x, &theta).unwrap();
        for (u, v) in f.iter().zip(&a) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(Architecture::linear(3, 2, true).num_params(), 8);
        assert_eq!(
            Architecture::mlp(&[14, 1000, 2], Activation::Selu).num_params(),
            14 * 1000 + 1000 + 1000 * 2 + 2
        );
    }

    #[test]
    fn flatten_round_trip() {
        let m = selu_net();
        let theta = m.init_params(3);
        let layers = m.unflatten(&theta).unwrap();
        assert_eq!(m.flatten(&layers).unwrap(), theta);
        assert!(m.unflatten(&ParamVector::zeros(4)).is_err());
    }

    #[test]
    fn linear_vjp_and_jvp() {
        let m = Model::new(Architecture::linear(2, 2, false)).unwrap();
        let theta = [0.5, -0.2, 0.1, 0.9];
        let x = [1.0, 2.0];
        assert_eq!(m.vjp(&x, &theta, &[1.0, 0.0]).unwrap(), vec![1.0, 2.0, 0.0, 0.0]);
        assert_eq!(m.vjp(&x, &theta, &[0.0, 0.0]).unwrap(), vec![0.0; 4]);
        assert_eq!(m.jvp(&x, &theta, &[1.0, 0.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(m.jvp(&x, &theta, &[0.0; 4]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_errors() {
        let m = selu_net();
        let theta = m.init_params(0);
        assert!(m.forward(&[1.0], &theta).is_err());
        assert!(m.vjp(&[1.0, 2.0, 3.0], &theta, &[1.0]).is_err());
        assert!(m.jvp(&[1.0, 2.0, 3.0], &theta, &[1.0]).is_err());
        assert!(m.forward(&[1.0, 2.0, 3.0], &theta[..3]).is_err());
    }

    #[test]
    fn adjoint_identity_and_fd() {
        let m = selu_net();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let theta = m.init_params(5);
        let x = random_vec(&mut rng, 3);
        for _ in 0..5 {
            let u = random_vec(&mut rng, 2);
            let a = random_vec(&mut rng, m.num_params());
            let lhs = dot(&u, &m.jvp(&x, &theta, &a).unwrap());
            let rhs = dot(&m.vjp(&x, &theta, &u).unwrap(), &a);
            assert!((lhs - rhs).abs() <= 1e-8 * (1.0 + lhs.abs()));

            let eps = 1e-4;
            let plus: Vec<f64> = theta.iter().zip(&a).map(|(t, d)| t + eps * d).collect();
            let minus: Vec<f64> = theta.iter().zip(&a).map(|(t, d)| t - eps * d).collect();
            let fp = m.forward(&x, &plus).unwrap();
            let fm = m.forward(&x, &minus).unwrap();
            let jv = m.jvp(&x, &theta, &a).unwrap();
            let jnorm = dot(&jv, &jv).sqrt();
            for o in 0..2 {
                let fd = (fp[o] - fm[o]) / (2.0 * eps);
                assert!((fd - jv[o]).abs() <= 1e-5 * (1.0 + jnorm));
            }
        }
    }

    #[test]
    fn pass_counter_deltas() {
        let m = selu_net();
        let theta = m.init_params(1);
        let x = [0.1, 0.2, 0.3];
        let before = m.counter().snapshot();
        m.vjp(&x, &theta, &[1.0, 1.0]).unwrap();
        let d = m.counter().snapshot() - before;
        assert_eq!((d.forward_mode, d.reverse_mode, d.plain_forward), (0, 1, 0));
        let before = m.counter().snapshot();
        m.jvp(&x, &theta, &vec![0.1; m.num_params()]).unwrap();
        let d = m.counter().snapshot() - before;
        assert_eq!((d.forward_mode, d.reverse_mode, d.plain_forward), (1, 0, 0));
        m.forward(&x, &theta).unwrap();
        assert_eq!(m.counter().snapshot().plain_forward, 1);
        m.counter().reset();
        assert_eq!(m.counter().snapshot(), PassCounts::default());
    }

    #[test]
    fn linear_jvp_independent_of_theta() {
        let m = Model::new(Architecture::linear(3, 2, true)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_vec(&mut rng, 3);
        let a = random_vec(&mut rng, 8);
        let j1 = m.jvp(&x, &random_vec(&mut rng, 8), &a).unwrap();
        let j2 = m.jvp(&x, &random_vec(&mut rng, 8), &a).unwrap();
        for (p, q) in j1.iter().zip(&j2) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn architecture_json() {
        let arch = Architecture::from_json(
            r#"{"layers":[{"in":14,"out":1000,"act":"selu"},{"in":1000,"out":2,"act":"identity"}]}"#,
        )
        .unwrap();
        assert_eq!(arch, Architecture::mlp(&[14, 1000, 2], Activation::Selu));
        assert!(Architecture::from_json(
            r#"{"layers":[{"in":3,"out":4,"act":"relu"},{"in":5,"out":1,"act":"identity"}]}"#
        )
        .is_err());
        let back = Architecture::from_json(&arch.to_json()).unwrap();
        assert_eq!(back, arch);
    }
}
