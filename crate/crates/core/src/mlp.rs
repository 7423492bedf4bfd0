//! Minimal differentiable MLP engine: forward pass with recorded
//! activations, exact reverse-mode gradients, and an adaptive-moment
//! optimizer. All policies, priors, and value functions are built on it.
//!
//! Numerics are 64-bit throughout; verification tolerances dominate over
//! speed at this scale.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden-layer activation. The output layer is always linear; heads apply
/// their own mappings (e.g. the bounded log-stddev transform).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Elu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn forward(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp() - 1.0
                }
            }
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative given the pre-activation `x` and the output `y = f(x)`.
    #[inline]
    fn grad(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// A named slice of the final layer output (e.g. `mean`, `log_stddev`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub name: String,
    pub len: usize,
}

/// Architecture of a fully connected network.
///
/// `layer_sizes` is `[input_dim, h1, ..., output_dim]`; `activation` applies
/// to hidden layers only. `heads` must partition the output dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub heads: Vec<HeadSpec>,
}

impl MlpSpec {
    /// A spec with a single anonymous head covering the whole output.
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        let out = *layer_sizes
            .last()
            .ok_or_else(|| Error::config("layer_sizes must not be empty"))?;
        Self::with_heads(
            layer_sizes,
            activation,
            vec![HeadSpec { name: "out".to_string(), len: out }],
        )
    }

    pub fn with_heads(
        layer_sizes: Vec<usize>,
        activation: Activation,
        heads: Vec<HeadSpec>,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::config("an MLP needs at least one layer (in, out)"));
        }
        if layer_sizes[..layer_sizes.len() - 1].iter().any(|&n| n == 0) {
            return Err(Error::config("input and hidden sizes must be positive"));
        }
        let out = *layer_sizes.last().unwrap();
        let head_total: usize = heads.iter().map(|h| h.len).sum();
        if head_total != out {
            return Err(Error::config(format!(
                "head slices cover {head_total} of {out} output dims"
            )));
        }
        Ok(MlpSpec { layer_sizes, activation, heads })
    }

    #[inline]
    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    #[inline]
    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    #[inline]
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Range of the named head within the output vector.
    pub fn head_range(&self, name: &str) -> Result<std::ops::Range<usize>> {
        let mut offset = 0;
        for h in &self.heads {
            if h.name == name {
                return Ok(offset..offset + h.len);
            }
            offset += h.len;
        }
        Err(Error::config(format!("no head named `{name}`")))
    }

    /// Total number of parameters (weights + biases).
    pub fn num_params(&self) -> usize {
        (0..self.num_layers())
            .map(|l| self.layer_sizes[l] * self.layer_sizes[l + 1] + self.layer_sizes[l + 1])
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat 64-bit parameter storage with a name index for each weight matrix
/// and bias. The index covers the array exactly once with no overlap.
///
/// Weight matrices are row-major `(out_dim, in_dim)` under `layer{l}.w`;
/// biases are `layer{l}.b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    index: Vec<ParamEntry>,
}

impl ParamVector {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let mut index = Vec::new();
        let mut offset = 0;
        for l in 0..spec.num_layers() {
            let w_len = spec.layer_sizes[l] * spec.layer_sizes[l + 1];
            index.push(ParamEntry { name: format!("layer{l}.w"), offset, len: w_len });
            offset += w_len;
            let b_len = spec.layer_sizes[l + 1];
            index.push(ParamEntry { name: format!("layer{l}.b"), offset, len: b_len });
            offset += b_len;
        }
        ParamVector { values: vec![0.0; offset], index }
    }

    /// Fan-in scaled uniform init for weights; biases start at zero.
    pub fn init<R: Rng>(spec: &MlpSpec, rng: &mut R) -> Self {
        let mut p = Self::zeros(spec);
        for l in 0..spec.num_layers() {
            let fan_in = spec.layer_sizes[l] as f64;
            let bound = 1.0 / fan_in.sqrt();
            let range = p.range(&format!("layer{l}.w")).unwrap();
            for v in &mut p.values[range] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        p
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn index(&self) -> &[ParamEntry] {
        &self.index
    }

    fn range(&self, name: &str) -> Result<std::ops::Range<usize>> {
        self.index
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.offset..e.offset + e.len)
            .ok_or_else(|| Error::config(format!("no parameter named `{name}`")))
    }

    pub fn slice(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.values[self.range(name)?])
    }

    pub fn slice_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let r = self.range(name)?;
        Ok(&mut self.values[r])
    }

    pub fn fill(&mut self, v: f64) {
        self.values.fill(v);
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Sum of squares, for gradient-norm diagnostics.
    pub fn sq_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Element-wise copy from another vector of the same shape.
    pub fn copy_from(&mut self, other: &ParamVector) {
        assert_eq!(self.values.len(), other.values.len(), "param shape mismatch");
        self.values.copy_from_slice(&other.values);
    }
}

/// Activations recorded by [`forward_traced`], needed for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("trace has at least one layer")
    }
}

fn layer_forward(
    spec: &MlpSpec,
    params: &ParamVector,
    l: usize,
    input: &[f64],
    pre: &mut Vec<f64>,
) {
    let in_dim = spec.layer_sizes[l];
    let out_dim = spec.layer_sizes[l + 1];
    let w = params.slice(&format!("layer{l}.w")).unwrap();
    let b = params.slice(&format!("layer{l}.b")).unwrap();
    pre.clear();
    pre.reserve(out_dim);
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = b[o];
        for (wi, xi) in row.iter().zip(input) {
            acc += wi * xi;
        }
        pre.push(acc);
    }
}

/// Deterministic forward pass. Errors on input dimension mismatch.
pub fn forward(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
    Ok(forward_traced(spec, params, input)?.post.pop().unwrap())
}

/// Forward pass that records the activations needed for [`backward`].
pub fn forward_traced(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<ForwardTrace> {
    if input.len() != spec.input_dim() {
        return Err(Error::config(format!(
            "input has {} dims, spec expects {}",
            input.len(),
            spec.input_dim()
        )));
    }
    if params.len() != spec.num_params() {
        return Err(Error::config("parameter vector does not match spec"));
    }
    let n = spec.num_layers();
    let mut pre = Vec::with_capacity(n);
    let mut post = Vec::with_capacity(n);
    let mut cur: &[f64] = input;
    for l in 0..n {
        let mut z = Vec::new();
        layer_forward(spec, params, l, cur, &mut z);
        let y = if l + 1 == n {
            z.clone()
        } else {
            z.iter().map(|&v| spec.activation.forward(v)).collect()
        };
        pre.push(z);
        post.push(y);
        cur = post.last().unwrap();
    }
    Ok(ForwardTrace { input: input.to_vec(), pre, post })
}

/// Reverse-mode gradients of `⟨output, cotangent⟩` with respect to all
/// parameters and the input. Parameter gradients are accumulated into
/// `grads` (callers zero it between uses); the input cotangent is returned.
pub fn backward_accumulate(
    spec: &MlpSpec,
    params: &ParamVector,
    trace: &ForwardTrace,
    output_cotangent: &[f64],
    grads: &mut ParamVector,
) -> Result<Vec<f64>> {
    if output_cotangent.len() != spec.output_dim() {
        return Err(Error::usage(format!(
            "cotangent has {} dims, output has {}",
            output_cotangent.len(),
            spec.output_dim()
        )));
    }
    if trace.post.len() != spec.num_layers() || trace.input.len() != spec.input_dim() {
        return Err(Error::usage("forward trace does not match spec"));
    }
    let n = spec.num_layers();
    let mut d_out = output_cotangent.to_vec();
    for l in (0..n).rev() {
        let in_dim = spec.layer_sizes[l];
        let out_dim = spec.layer_sizes[l + 1];
        // d(pre-activation): the output layer is linear.
        let mut d_pre = d_out;
        if l + 1 != n {
            for (i, dp) in d_pre.iter_mut().enumerate() {
                *dp *= spec.activation.grad(trace.pre[l][i], trace.post[l][i]);
            }
        }
        let layer_in: &[f64] = if l == 0 { &trace.input } else { &trace.post[l - 1] };
        {
            let dw = grads.slice_mut(&format!("layer{l}.w"))?;
            for o in 0..out_dim {
                let g = d_pre[o];
                let row = &mut dw[o * in_dim..(o + 1) * in_dim];
                for (ri, xi) in row.iter_mut().zip(layer_in) {
                    *ri += g * xi;
                }
            }
        }
        {
            let db = grads.slice_mut(&format!("layer{l}.b"))?;
            for (bi, g) in db.iter_mut().zip(&d_pre) {
                *bi += g;
            }
        }
        let w = params.slice(&format!("layer{l}.w"))?;
        let mut d_in = vec![0.0; in_dim];
        for o in 0..out_dim {
            let g = d_pre[o];
            let row = &w[o * in_dim..(o + 1) * in_dim];
            for (di, wi) in d_in.iter_mut().zip(row) {
                *di += g * wi;
            }
        }
        d_out = d_in;
    }
    Ok(d_out)
}

/// Convenience wrapper around [`backward_accumulate`] returning fresh grads.
pub fn backward(
    spec: &MlpSpec,
    params: &ParamVector,
    trace: &ForwardTrace,
    output_cotangent: &[f64],
) -> Result<(ParamVector, Vec<f64>)> {
    let mut grads = ParamVector::zeros(spec);
    let d_in = backward_accumulate(spec, params, trace, output_cotangent, &mut grads)?;
    Ok((grads, d_in))
}

/// Gradient direction for [`adam_step`]: policies ascend their objective,
/// value and distillation losses descend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Ascent,
    Descent,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Per-parameter first/second moment accumulators plus step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(num_params: usize, learning_rate: f64) -> Self {
        AdamState { m: vec![0.0; num_params], v: vec![0.0; num_params], step: 0, learning_rate }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One adaptive-moment update. A non-finite gradient component rejects the
/// whole step: parameters and moments are left untouched and an error is
/// returned so the caller can report it.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut ParamVector,
    grads: &ParamVector,
    direction: Direction,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::config("optimizer/parameter shape mismatch"));
    }
    if !grads.all_finite() {
        return Err(Error::non_finite("gradient contains NaN or inf; step rejected"));
    }
    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - ADAM_BETA1.powf(t);
    let bias2 = 1.0 - ADAM_BETA2.powf(t);
    let sign = match direction {
        Direction::Ascent => 1.0,
        Direction::Descent => -1.0,
    };
    for i in 0..params.len() {
        let g = grads.values()[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / bias1;
        let v_hat = state.v[i] / bias2;
        params.values_mut()[i] += sign * state.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Bounds for the smooth log-stddev clamp applied to stddev heads.
pub const LOG_STDDEV_MIN: f64 = -5.0;
pub const LOG_STDDEV_MAX: f64 = 2.0;

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps a raw head output to a stddev via a smooth clamp of the log-stddev
/// to `[LOG_STDDEV_MIN, LOG_STDDEV_MAX]`.
#[inline]
pub fn stddev_from_raw(raw: f64) -> f64 {
    (LOG_STDDEV_MIN + (LOG_STDDEV_MAX - LOG_STDDEV_MIN) * sigmoid(raw)).exp()
}

/// d(stddev)/d(raw) for [`stddev_from_raw`].
#[inline]
pub fn stddev_from_raw_grad(raw: f64) -> f64 {
    let s = sigmoid(raw);
    stddev_from_raw(raw) * (LOG_STDDEV_MAX - LOG_STDDEV_MIN) * s * (1.0 - s)
}

/// Inverse of [`stddev_from_raw`], for initializing stddev head biases.
pub fn raw_from_stddev(stddev: f64) -> f64 {
    let y = (stddev.ln() - LOG_STDDEV_MIN) / (LOG_STDDEV_MAX - LOG_STDDEV_MIN);
    assert!(y > 0.0 && y < 1.0, "stddev {stddev} outside the clamp range");
    (y / (1.0 - y)).ln()
}

/// Versioned checkpoint of a single network: spec, name index, flat values.
/// JSON round-trips are bit-exact for finite 64-bit values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetCheckpoint {
    pub version: u32,
    pub spec: MlpSpec,
    pub params: ParamVector,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl NetCheckpoint {
    pub fn new(spec: &MlpSpec, params: &ParamVector) -> Self {
        NetCheckpoint { version: CHECKPOINT_VERSION, spec: spec.clone(), params: params.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ckpt: NetCheckpoint = serde_json::from_str(s)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::config(format!("unsupported checkpoint version {}", ckpt.version)));
        }
        if ckpt.params.len() != ckpt.spec.num_params() {
            return Err(Error::config("checkpoint values do not match spec"));
        }
        Ok(ckpt)
    }
}
