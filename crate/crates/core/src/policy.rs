//! Hierarchical agent (high-level, low-level) and default policy with
//! information-asymmetry views, three high-level prior families, latent
//! period scheduling, and low-level parameter sharing.
//!
//! A stack snapshot (all parameter values copied) may be used concurrently
//! by many actors; a learner mutates only its own working copy.

use serde::{Deserialize, Serialize};

use crate::dist::{
    kl_categorical, kl_diag_gaussian, sample_reparam, Categorical, DiagGaussian, NoiseDraw,
};
use crate::error::{Error, Result};
use crate::mlp::{
    self, Activation, ForwardTrace, HeadSpec, MlpSpec, ParamVector, raw_from_stddev,
    stddev_from_raw, stddev_from_raw_grad,
};

/// Named feature groups of an observation. Missing groups stay empty and
/// are never silently zero-filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObsGroup {
    Proprio,
    Task,
    Internal,
    Global,
}

pub const ALL_GROUPS: [ObsGroup; 4] =
    [ObsGroup::Proprio, ObsGroup::Task, ObsGroup::Internal, ObsGroup::Global];

/// Per-step observation, split into feature groups so asymmetry views can
/// select sub-views per consumer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationBundle {
    pub proprio: Vec<f64>,
    pub task: Vec<f64>,
    pub internal: Vec<f64>,
    pub global: Vec<f64>,
}

impl ObservationBundle {
    pub fn group(&self, g: ObsGroup) -> &[f64] {
        match g {
            ObsGroup::Proprio => &self.proprio,
            ObsGroup::Task => &self.task,
            ObsGroup::Internal => &self.internal,
            ObsGroup::Global => &self.global,
        }
    }

    pub fn group_mut(&mut self, g: ObsGroup) -> &mut Vec<f64> {
        match g {
            ObsGroup::Proprio => &mut self.proprio,
            ObsGroup::Task => &mut self.task,
            ObsGroup::Internal => &mut self.internal,
            ObsGroup::Global => &mut self.global,
        }
    }
}

/// Which policy component is reading an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Consumer {
    Hl,
    Ll,
    DefaultHl,
    DefaultLl,
}

/// The subset of observation groups each consumer may read. Groups are
/// concatenated in the fixed order proprio, task, internal, global.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymmetryMask {
    pub hl: Vec<ObsGroup>,
    pub ll: Vec<ObsGroup>,
    pub default_hl: Vec<ObsGroup>,
    pub default_ll: Vec<ObsGroup>,
}

impl AsymmetryMask {
    pub fn new(
        hl: Vec<ObsGroup>,
        ll: Vec<ObsGroup>,
        default_hl: Vec<ObsGroup>,
        default_ll: Vec<ObsGroup>,
    ) -> Result<Self> {
        let mask = AsymmetryMask { hl, ll, default_hl, default_ll };
        mask.validate()?;
        Ok(mask)
    }

    pub fn validate(&self) -> Result<()> {
        // Default policies must stay blind to task identity.
        if self.default_hl.contains(&ObsGroup::Task) || self.default_ll.contains(&ObsGroup::Task) {
            return Err(Error::config("default policies may not read the task group"));
        }
        Ok(())
    }

    pub fn groups(&self, consumer: Consumer) -> &[ObsGroup] {
        match consumer {
            Consumer::Hl => &self.hl,
            Consumer::Ll => &self.ll,
            Consumer::DefaultHl => &self.default_hl,
            Consumer::DefaultLl => &self.default_ll,
        }
    }

    /// Concatenated view of the groups this consumer may read, in canonical
    /// group order.
    pub fn view(&self, consumer: Consumer, obs: &ObservationBundle) -> Vec<f64> {
        let groups = self.groups(consumer);
        let mut out = Vec::new();
        for g in ALL_GROUPS {
            if groups.contains(&g) {
                out.extend_from_slice(obs.group(g));
            }
        }
        out
    }

    pub fn view_dim(&self, consumer: Consumer, dims: &GroupDims) -> usize {
        let groups = self.groups(consumer);
        ALL_GROUPS
            .iter()
            .filter(|g| groups.contains(g))
            .map(|&g| dims.dim(g))
            .sum()
    }
}

/// Per-group feature dimensions, fixed per environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupDims {
    pub proprio: usize,
    pub task: usize,
    pub internal: usize,
    pub global: usize,
}

impl GroupDims {
    pub fn dim(&self, g: ObsGroup) -> usize {
        match g {
            ObsGroup::Proprio => self.proprio,
            ObsGroup::Task => self.task,
            ObsGroup::Internal => self.internal,
            ObsGroup::Global => self.global,
        }
    }
}

/// Action space of the environment the stack controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionSpace {
    Continuous { dim: usize },
    Discrete { n: usize },
}

/// High-level default policy family. The default never reads the
/// observation; it is conditioned on the previous latent only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PriorKind {
    /// `N(0, 1)` independent of everything.
    IsoGaussian,
    /// First-order autoregressive process with fixed parameter:
    /// `N(α z_prev, √(1−α²))`, marginally `N(0, 1)`.
    Ar1 { alpha: f64 },
    /// Gaussian with learned mean and stddev functions of `z_prev`.
    ArLearned { spec: MlpSpec, params: ParamVector },
}

impl PriorKind {
    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        match self {
            PriorKind::IsoGaussian => Ok(()),
            PriorKind::Ar1 { alpha } => {
                if !(0.0..1.0).contains(alpha) {
                    Err(Error::config("AR(1) parameter must be in [0, 1)"))
                } else {
                    Ok(())
                }
            }
            PriorKind::ArLearned { spec, params } => {
                if spec.input_dim() != latent_dim {
                    return Err(Error::config("learned prior input must be the latent"));
                }
                check_gaussian_heads(spec, latent_dim)?;
                if params.len() != spec.num_params() {
                    return Err(Error::config("learned prior params do not match spec"));
                }
                Ok(())
            }
        }
    }

    /// Whether this prior carries trainable parameters.
    pub fn is_trainable(&self) -> bool {
        matches!(self, PriorKind::ArLearned { .. })
    }
}

/// Low-level default policy: either the agent's own low-level parameters
/// (making the low-level KL identically zero) or a separate network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DefaultLl {
    Shared,
    Separate { spec: MlpSpec, params: ParamVector },
}

fn check_gaussian_heads(spec: &MlpSpec, dim: usize) -> Result<()> {
    let mean = spec.head_range("mean")?;
    let raw = spec.head_range("log_stddev")?;
    if mean.len() != dim || raw.len() != dim {
        return Err(Error::config(format!("gaussian heads must each have {dim} dims")));
    }
    Ok(())
}

/// Parameters and wiring for the hierarchical policy pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyStack {
    pub hl_spec: MlpSpec,
    pub hl_params: ParamVector,
    pub ll_spec: MlpSpec,
    pub ll_params: ParamVector,
    pub default_hl: PriorKind,
    pub default_ll: DefaultLl,
    pub latent_dim: usize,
    pub latent_period: usize,
    pub asymmetry: AsymmetryMask,
    pub action_space: ActionSpace,
    pub group_dims: GroupDims,
    /// Smooth bound on the high-level mean head (latent space scale).
    #[serde(default)]
    pub hl_mean_bound: Option<f64>,
    /// Smooth bound on continuous low-level mean heads (action box scale).
    #[serde(default)]
    pub ll_mean_bound: Option<f64>,
}

impl PolicyStack {
    pub fn validate(&self) -> Result<()> {
        self.asymmetry.validate()?;
        if self.latent_period == 0 {
            return Err(Error::config("latent period must be >= 1"));
        }
        let hl_in = self.asymmetry.view_dim(Consumer::Hl, &self.group_dims);
        if self.hl_spec.input_dim() != hl_in {
            return Err(Error::config(format!(
                "hl input dim {} does not match view dim {hl_in}",
                self.hl_spec.input_dim()
            )));
        }
        if self.latent_dim > 0 {
            check_gaussian_heads(&self.hl_spec, self.latent_dim)?;
        } else if self.hl_spec.output_dim() != 0 {
            return Err(Error::config("flat stacks need a zero-dim hl output"));
        }
        self.default_hl.validate(self.latent_dim)?;
        let ll_in = self.asymmetry.view_dim(Consumer::Ll, &self.group_dims) + self.latent_dim;
        if self.ll_spec.input_dim() != ll_in {
            return Err(Error::config(format!(
                "ll input dim {} does not match view+latent dim {ll_in}",
                self.ll_spec.input_dim()
            )));
        }
        self.check_action_heads(&self.ll_spec)?;
        if let DefaultLl::Separate { spec, params } = &self.default_ll {
            let dll_in =
                self.asymmetry.view_dim(Consumer::DefaultLl, &self.group_dims) + self.latent_dim;
            if spec.input_dim() != dll_in {
                return Err(Error::config("default ll input dim mismatch"));
            }
            self.check_action_heads(spec)?;
            if params.len() != spec.num_params() {
                return Err(Error::config("default ll params do not match spec"));
            }
        }
        if self.hl_params.len() != self.hl_spec.num_params()
            || self.ll_params.len() != self.ll_spec.num_params()
        {
            return Err(Error::config("stack params do not match specs"));
        }
        Ok(())
    }

    fn check_action_heads(&self, spec: &MlpSpec) -> Result<()> {
        match self.action_space {
            ActionSpace::Continuous { dim } => check_gaussian_heads(spec, dim),
            ActionSpace::Discrete { n } => {
                let r = spec.head_range("logits")?;
                if r.len() != n {
                    return Err(Error::config(format!("logits head must have {n} dims")));
                }
                Ok(())
            }
        }
    }

    /// The default-policy parameter view of this stack (online copies).
    pub fn defaults(&self) -> (PriorKind, DefaultLl) {
        (self.default_hl.clone(), self.default_ll.clone())
    }
}

/// An action taken by some policy, continuous or discrete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActionRecord {
    Continuous(Vec<f64>),
    Discrete(usize),
}

/// Output distribution of a low-level policy.
#[derive(Debug, Clone, PartialEq)]
pub enum ActionDist {
    Gaussian(DiagGaussian),
    Categorical(Categorical),
}

impl ActionDist {
    pub fn log_prob(&self, action: &ActionRecord) -> Result<f64> {
        match (self, action) {
            (ActionDist::Gaussian(d), ActionRecord::Continuous(a)) => d.log_prob(a),
            (ActionDist::Categorical(d), ActionRecord::Discrete(a)) => d.log_prob(*a),
            _ => Err(Error::usage("action kind does not match distribution")),
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            ActionDist::Gaussian(d) => d.entropy(),
            ActionDist::Categorical(d) => d.entropy(),
        }
    }
}

/// Smooth bound for mean heads: `s · tanh(raw / s)`, the identity near zero
/// and saturating at ±s. Action means live in the environment's box;
/// latent means stay within the useful range of the unit-Gaussian priors.
#[inline]
pub fn bounded_mean(raw: f64, scale: f64) -> f64 {
    scale * (raw / scale).tanh()
}

#[inline]
fn bounded_mean_grad(raw: f64, scale: f64) -> f64 {
    let t = (raw / scale).tanh();
    1.0 - t * t
}

/// Gaussian-headed network evaluation with the recorded trace and the raw
/// head values needed for the clamp derivatives.
#[derive(Debug, Clone)]
pub struct GaussEval {
    pub trace: ForwardTrace,
    pub dist: DiagGaussian,
    raw_stddev: Vec<f64>,
    raw_mean: Vec<f64>,
    mean_bound: Option<f64>,
}

/// Evaluates a network with `mean`/`log_stddev` heads into a diagonal
/// Gaussian, without a mean bound.
pub fn gauss_eval(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<GaussEval> {
    gauss_eval_bounded(spec, params, input, None)
}

/// As [`gauss_eval`], with the mean head smoothly bounded to ±scale.
pub fn gauss_eval_bounded(
    spec: &MlpSpec,
    params: &ParamVector,
    input: &[f64],
    mean_bound: Option<f64>,
) -> Result<GaussEval> {
    let trace = mlp::forward_traced(spec, params, input)?;
    let out = trace.output();
    let mean_r = spec.head_range("mean")?;
    let raw_r = spec.head_range("log_stddev")?;
    let raw_mean = out[mean_r].to_vec();
    let mean: Vec<f64> = match mean_bound {
        Some(s) => raw_mean.iter().map(|&r| bounded_mean(r, s)).collect(),
        None => raw_mean.clone(),
    };
    let raw: Vec<f64> = out[raw_r].to_vec();
    let stddev: Vec<f64> = raw.iter().map(|&r| stddev_from_raw(r)).collect();
    Ok(GaussEval {
        dist: DiagGaussian::new(mean, stddev)?,
        trace,
        raw_stddev: raw,
        raw_mean,
        mean_bound,
    })
}

/// Backward through a Gaussian-headed network: cotangents on the mean and
/// stddev are mapped through the smooth clamps onto the raw heads, then
/// through the network. Parameter gradients accumulate into `grads`; the
/// input cotangent is returned.
pub fn gauss_backward_accumulate(
    spec: &MlpSpec,
    params: &ParamVector,
    eval: &GaussEval,
    d_mean: &[f64],
    d_stddev: &[f64],
    grads: &mut ParamVector,
) -> Result<Vec<f64>> {
    let mut cot = vec![0.0; spec.output_dim()];
    let mean_r = spec.head_range("mean")?;
    let raw_r = spec.head_range("log_stddev")?;
    if d_mean.len() != mean_r.len() || d_stddev.len() != raw_r.len() {
        return Err(Error::usage("head cotangent dimension mismatch"));
    }
    match eval.mean_bound {
        Some(s) => {
            for (slot, (dm, raw)) in
                cot[mean_r].iter_mut().zip(d_mean.iter().zip(&eval.raw_mean))
            {
                *slot = dm * bounded_mean_grad(*raw, s);
            }
        }
        None => cot[mean_r].copy_from_slice(d_mean),
    }
    for (slot, (ds, raw)) in cot[raw_r].iter_mut().zip(d_stddev.iter().zip(&eval.raw_stddev)) {
        *slot = ds * stddev_from_raw_grad(*raw);
    }
    mlp::backward_accumulate(spec, params, &eval.trace, &cot, grads)
}

/// Categorical-headed network evaluation.
#[derive(Debug, Clone)]
pub struct CatEval {
    pub trace: ForwardTrace,
    pub dist: Categorical,
}

pub fn cat_eval(spec: &MlpSpec, params: &ParamVector, input: &[f64]) -> Result<CatEval> {
    let trace = mlp::forward_traced(spec, params, input)?;
    let r = spec.head_range("logits")?;
    let dist = Categorical::new(trace.output()[r].to_vec())?;
    Ok(CatEval { trace, dist })
}

pub fn cat_backward_accumulate(
    spec: &MlpSpec,
    params: &ParamVector,
    eval: &CatEval,
    d_logits: &[f64],
    grads: &mut ParamVector,
) -> Result<Vec<f64>> {
    let mut cot = vec![0.0; spec.output_dim()];
    let r = spec.head_range("logits")?;
    if d_logits.len() != r.len() {
        return Err(Error::usage("logits cotangent dimension mismatch"));
    }
    cot[r].copy_from_slice(d_logits);
    mlp::backward_accumulate(spec, params, &eval.trace, &cot, grads)
}

/// Low-level policy evaluation, keeping the trace for learners.
#[derive(Debug, Clone)]
pub enum LlEval {
    Gaussian(GaussEval),
    Categorical(CatEval),
}

impl LlEval {
    pub fn dist(&self) -> ActionDist {
        match self {
            LlEval::Gaussian(g) => ActionDist::Gaussian(g.dist.clone()),
            LlEval::Categorical(c) => ActionDist::Categorical(c.dist.clone()),
        }
    }
}

/// True iff the latent is resampled at (1-based) step `t` under period `p`:
/// `t mod p ≡ 1`, so `p = 1` resamples every step.
#[inline]
pub fn latent_schedule(t: usize, p: usize) -> bool {
    debug_assert!(t >= 1 && p >= 1, "episodes index from 1 and p >= 1");
    t % p == 1 % p
}

/// High-level policy step: assembles the HL view, evaluates the HL network,
/// and reparameterizes the latent sample.
pub fn hl_step(
    stack: &PolicyStack,
    obs: &ObservationBundle,
    eps: &NoiseDraw,
) -> Result<(Vec<f64>, DiagGaussian)> {
    let eval = hl_eval(stack, obs)?;
    let z = sample_reparam(&eval.dist, eps)?;
    Ok((z, eval.dist))
}

/// HL evaluation with trace, for learners.
pub fn hl_eval(stack: &PolicyStack, obs: &ObservationBundle) -> Result<GaussEval> {
    let view = stack.asymmetry.view(Consumer::Hl, obs);
    if stack.latent_dim == 0 {
        // Flat stack: a zero-dim latent with an empty distribution.
        let trace = mlp::forward_traced(&stack.hl_spec, &stack.hl_params, &view)?;
        return Ok(GaussEval {
            trace,
            dist: DiagGaussian::standard(0),
            raw_stddev: Vec::new(),
            raw_mean: Vec::new(),
            mean_bound: None,
        });
    }
    gauss_eval_bounded(&stack.hl_spec, &stack.hl_params, &view, stack.hl_mean_bound)
}

/// Low-level policy step: action distribution at the sampled latent.
pub fn ll_step(stack: &PolicyStack, z: &[f64], obs: &ObservationBundle) -> Result<ActionDist> {
    Ok(ll_eval(stack, z, obs)?.dist())
}

/// LL evaluation with trace, for learners.
pub fn ll_eval(stack: &PolicyStack, z: &[f64], obs: &ObservationBundle) -> Result<LlEval> {
    if z.len() != stack.latent_dim {
        return Err(Error::config("latent dimension mismatch"));
    }
    let mut input = stack.asymmetry.view(Consumer::Ll, obs);
    input.extend_from_slice(z);
    match stack.action_space {
        ActionSpace::Continuous { .. } => Ok(LlEval::Gaussian(gauss_eval_bounded(
            &stack.ll_spec,
            &stack.ll_params,
            &input,
            stack.ll_mean_bound,
        )?)),
        ActionSpace::Discrete { .. } => {
            Ok(LlEval::Categorical(cat_eval(&stack.ll_spec, &stack.ll_params, &input)?))
        }
    }
}

/// Default HL policy: `N(0,1)`, the AR(1) process, or the learned AR prior.
/// `z_prev` is the zero vector at episode start; the learned prior's mean
/// head shares the stack's latent mean bound.
pub fn default_hl_step(
    kind: &PriorKind,
    z_prev: &[f64],
    latent_dim: usize,
    mean_bound: Option<f64>,
) -> Result<DiagGaussian> {
    if z_prev.len() != latent_dim {
        return Err(Error::config("z_prev dimension mismatch"));
    }
    match kind {
        PriorKind::IsoGaussian => Ok(DiagGaussian::standard(latent_dim)),
        PriorKind::Ar1 { alpha } => {
            let sd = (1.0 - alpha * alpha).sqrt();
            DiagGaussian::new(
                z_prev.iter().map(|&z| alpha * z).collect(),
                vec![sd; latent_dim],
            )
        }
        PriorKind::ArLearned { spec, params } => {
            Ok(gauss_eval_bounded(spec, params, z_prev, mean_bound)?.dist)
        }
    }
}

/// Default LL policy distribution at the sampled latent. In shared mode this
/// is exactly the agent's own LL distribution.
pub fn default_ll_step(
    stack: &PolicyStack,
    default_ll: &DefaultLl,
    z: &[f64],
    obs: &ObservationBundle,
) -> Result<ActionDist> {
    match default_ll {
        DefaultLl::Shared => ll_step(stack, z, obs),
        DefaultLl::Separate { spec, params } => {
            let mut input = stack.asymmetry.view(Consumer::DefaultLl, obs);
            input.extend_from_slice(z);
            match stack.action_space {
                ActionSpace::Continuous { .. } => Ok(ActionDist::Gaussian(
                    gauss_eval_bounded(spec, params, &input, stack.ll_mean_bound)?.dist,
                )),
                ActionSpace::Discrete { .. } => {
                    Ok(ActionDist::Categorical(cat_eval(spec, params, &input)?.dist))
                }
            }
        }
    }
}

/// Per-step KL regularizer terms against a supplied default parameter set
/// (online for distillation, target copies for reward shaping).
///
/// `kl_hl = KL(π_H(·|x) ‖ π0_H(·|z_prev))`; `kl_ll` is identically zero in
/// shared mode, otherwise the closed-form KL of the two LL distributions at
/// the sampled latent.
pub fn step_kl_terms(
    stack: &PolicyStack,
    obs: &ObservationBundle,
    z: &[f64],
    z_prev: &[f64],
    hl_dist: &DiagGaussian,
    ll_dist: &ActionDist,
    default_hl: &PriorKind,
    default_ll: &DefaultLl,
) -> Result<(f64, f64)> {
    let prior = default_hl_step(default_hl, z_prev, stack.latent_dim, stack.hl_mean_bound)?;
    let kl_hl = kl_diag_gaussian(hl_dist, &prior)?;
    let kl_ll = match default_ll {
        DefaultLl::Shared => 0.0,
        DefaultLl::Separate { .. } => {
            let d0 = default_ll_step(stack, default_ll, z, obs)?;
            match (ll_dist, &d0) {
                (ActionDist::Gaussian(p), ActionDist::Gaussian(q)) => kl_diag_gaussian(p, q)?,
                (ActionDist::Categorical(p), ActionDist::Categorical(q)) => {
                    kl_categorical(p, q)?
                }
                _ => return Err(Error::usage("mismatched LL distribution kinds")),
            }
        }
    };
    Ok((kl_hl, kl_ll))
}

/// Latent bookkeeping for an episode: the held sample, the previous sample
/// (for AR priors), and the step index driving the schedule.
#[derive(Debug, Clone)]
pub struct LatentState {
    pub z: Vec<f64>,
    pub z_prev: Vec<f64>,
    pub step_index: usize,
    pub period: usize,
}

impl LatentState {
    /// Episode start: both latents are the zero vector, steps begin at 1.
    pub fn begin_episode(latent_dim: usize, period: usize) -> Self {
        LatentState {
            z: vec![0.0; latent_dim],
            z_prev: vec![0.0; latent_dim],
            step_index: 0,
            period,
        }
    }

    /// Advance to the next step; true iff the latent must be resampled now.
    pub fn advance(&mut self) -> bool {
        self.step_index += 1;
        latent_schedule(self.step_index, self.period)
    }

    /// Install a freshly sampled latent, shifting the held one to `z_prev`.
    pub fn install(&mut self, z: Vec<f64>) {
        self.z_prev = std::mem::replace(&mut self.z, z);
    }
}

/// Builds Gaussian head specs `[mean, log_stddev]` for `dim` outputs on top
/// of the given hidden sizes.
pub fn gaussian_net_spec(
    input_dim: usize,
    hidden: &[usize],
    dim: usize,
    activation: Activation,
) -> Result<MlpSpec> {
    let mut sizes = vec![input_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(2 * dim);
    MlpSpec::with_heads(
        sizes,
        activation,
        vec![
            HeadSpec { name: "mean".into(), len: dim },
            HeadSpec { name: "log_stddev".into(), len: dim },
        ],
    )
}

/// Builds a logits-headed spec for `n` discrete actions.
pub fn categorical_net_spec(
    input_dim: usize,
    hidden: &[usize],
    n: usize,
    activation: Activation,
) -> Result<MlpSpec> {
    let mut sizes = vec![input_dim];
    sizes.extend_from_slice(hidden);
    sizes.push(n);
    MlpSpec::with_heads(sizes, activation, vec![HeadSpec { name: "logits".into(), len: n }])
}

/// Sets the `log_stddev` head bias so a freshly initialized net outputs
/// approximately `stddev` (raw head weights are small at init).
pub fn init_stddev_bias(spec: &MlpSpec, params: &mut ParamVector, stddev: f64) -> Result<()> {
    let raw = raw_from_stddev(stddev);
    let head = spec.head_range("log_stddev")?;
    let last = spec.num_layers() - 1;
    let bias = params.slice_mut(&format!("layer{last}.b"))?;
    for slot in &mut bias[head] {
        *slot = raw;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SeedRng;
    use rand::{Rng, SeedableRng};

    fn grid_dims() -> GroupDims {
        GroupDims { proprio: 0, task: 0, internal: 2, global: 4 }
    }

    fn grid_mask() -> AsymmetryMask {
        AsymmetryMask::new(
            vec![ObsGroup::Global],
            vec![ObsGroup::Internal],
            vec![],
            vec![ObsGroup::Internal],
        )
        .unwrap()
    }

    pub(crate) fn test_stack(seed: u64, prior: PriorKind, shared: bool) -> PolicyStack {
        let mut rng = SeedRng::seed_from_u64(seed);
        let dims = grid_dims();
        let mask = grid_mask();
        let latent_dim = 3;
        let hl_spec = gaussian_net_spec(4, &[8], latent_dim, Activation::Elu).unwrap();
        let mut hl_params = ParamVector::init(&hl_spec, &mut rng);
        init_stddev_bias(&hl_spec, &mut hl_params, 1.0).unwrap();
        let ll_spec = categorical_net_spec(2 + latent_dim, &[8], 4, Activation::Elu).unwrap();
        let ll_params = ParamVector::init(&ll_spec, &mut rng);
        let default_ll = if shared {
            DefaultLl::Shared
        } else {
            let spec = categorical_net_spec(2 + latent_dim, &[8], 4, Activation::Elu).unwrap();
            let params = ParamVector::init(&spec, &mut rng);
            DefaultLl::Separate { spec, params }
        };
        let stack = PolicyStack {
            hl_spec,
            hl_params,
            ll_spec,
            ll_params,
            default_hl: prior,
            default_ll,
            latent_dim,
            latent_period: 1,
            asymmetry: mask,
            action_space: ActionSpace::Discrete { n: 4 },
            group_dims: dims,
            hl_mean_bound: None,
            ll_mean_bound: None,
        };
        stack.validate().unwrap();
        stack
    }

    fn obs(global: Vec<f64>, internal: Vec<f64>) -> ObservationBundle {
        ObservationBundle { proprio: vec![], task: vec![], internal, global }
    }

    #[test]
    fn zero_weight_hl_with_zero_noise_returns_bias_mean() {
        let mut stack = test_stack(1, PriorKind::IsoGaussian, true);
        stack.hl_params.fill(0.0);
        let last = stack.hl_spec.num_layers() - 1;
        {
            let mean_range = stack.hl_spec.head_range("mean").unwrap();
            let b = stack.hl_params.slice_mut(&format!("layer{last}.b")).unwrap();
            b[mean_range][0] = 0.7;
        }
        let o = obs(vec![0.1, 0.2, 0.3, 0.4], vec![0.0, 0.0]);
        let (z, dist) = hl_step(&stack, &o, &NoiseDraw::zeros(3)).unwrap();
        assert_eq!(z, vec![0.7, 0.0, 0.0]);
        assert_eq!(dist.mean(), &[0.7, 0.0, 0.0]);
    }

    #[test]
    fn hl_step_is_deterministic() {
        let stack = test_stack(2, PriorKind::IsoGaussian, true);
        let o = obs(vec![0.5, -0.5, 0.25, 0.0], vec![0.0, 0.0]);
        let mut rng = SeedRng::seed_from_u64(3);
        let eps = NoiseDraw::standard(3, &mut rng);
        let (z1, _) = hl_step(&stack, &o, &eps).unwrap();
        let (z2, _) = hl_step(&stack, &o, &eps).unwrap();
        assert!(z1.iter().zip(&z2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn hl_latent_gradient_matches_finite_differences() {
        let stack = test_stack(4, PriorKind::IsoGaussian, true);
        let o = obs(vec![0.3, -0.1, 0.8, 0.2], vec![0.0, 0.0]);
        let eps = NoiseDraw(vec![0.3, -1.1, 0.5]);
        // Scalar probe: sum of z components.
        let eval = hl_eval(&stack, &o).unwrap();
        let d_mean = vec![1.0; 3];
        let d_stddev = eps.0.clone();
        let mut grads = ParamVector::zeros(&stack.hl_spec);
        gauss_backward_accumulate(
            &stack.hl_spec,
            &stack.hl_params,
            &eval,
            &d_mean,
            &d_stddev,
            &mut grads,
        )
        .unwrap();
        let loss = |p: &ParamVector| -> f64 {
            let mut s = stack.clone();
            s.hl_params = p.clone();
            let (z, _) = hl_step(&s, &o, &eps).unwrap();
            z.iter().sum()
        };
        let err = crate::oracle::max_rel_error_fd(loss, &stack.hl_params, grads.values(), 1e-5);
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn discrete_ll_is_a_four_way_categorical() {
        let stack = test_stack(5, PriorKind::IsoGaussian, true);
        let dist = ll_step(&stack, &[0.0, 0.0, 0.0], &obs(vec![0.0; 4], vec![0.0, 0.0])).unwrap();
        match dist {
            ActionDist::Categorical(c) => assert_eq!(c.num_actions(), 4),
            _ => panic!("grid world low level must be categorical"),
        }
    }

    #[test]
    fn latent_changes_ll_logits() {
        let stack = test_stack(6, PriorKind::IsoGaussian, true);
        let o = obs(vec![0.0; 4], vec![0.5, -0.5]);
        let a = ll_step(&stack, &[0.0, 0.0, 0.0], &o).unwrap();
        let b = ll_step(&stack, &[1.0, -1.0, 0.5], &o).unwrap();
        match (a, b) {
            (ActionDist::Categorical(x), ActionDist::Categorical(y)) => {
                assert!(x.logits().iter().zip(y.logits()).any(|(u, v)| (u - v).abs() > 1e-9));
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn shared_mode_default_ll_equals_agent_ll() {
        let stack = test_stack(7, PriorKind::IsoGaussian, true);
        let mut rng = SeedRng::seed_from_u64(8);
        for _ in 0..10 {
            let o = obs(
                (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let z: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let agent = ll_step(&stack, &z, &o).unwrap();
            let def = default_ll_step(&stack, &DefaultLl::Shared, &z, &o).unwrap();
            assert_eq!(agent, def);
        }
    }

    #[test]
    fn ar1_with_zero_alpha_equals_iso() {
        let z_prev = vec![0.4, -1.0, 0.2];
        let ar = default_hl_step(&PriorKind::Ar1 { alpha: 0.0 }, &z_prev, 3, None).unwrap();
        let iso = default_hl_step(&PriorKind::IsoGaussian, &z_prev, 3, None).unwrap();
        assert_eq!(ar, iso);
    }

    #[test]
    fn ar1_stddev_preserves_unit_marginal() {
        let d = default_hl_step(&PriorKind::Ar1 { alpha: 0.9 }, &[1.0], 1, None).unwrap();
        assert!((d.stddev()[0] - 0.19f64.sqrt()).abs() < 1e-15);
        assert!((d.stddev()[0] - 0.43589).abs() < 1e-5);
    }

    #[test]
    fn ar1_is_stationary_under_unit_gaussian_inputs() {
        // If z_prev ~ N(0,1), the marginal of z stays N(0,1).
        let mut rng = SeedRng::seed_from_u64(9);
        let kind = PriorKind::Ar1 { alpha: 0.9 };
        let n = 100_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let z_prev: f64 = rng.sample(rand_distr::StandardNormal);
            let d = default_hl_step(&kind, &[z_prev], 1, None).unwrap();
            let z = sample_reparam(&d, &NoiseDraw::standard(1, &mut rng)).unwrap()[0];
            sum += z;
            sum_sq += z * z;
        }
        let mean = sum / n as f64;
        let var = sum_sq / n as f64 - mean * mean;
        let se = 1.0 / (n as f64).sqrt();
        assert!(mean.abs() < 4.0 * se, "marginal mean {mean}");
        // Var(z²) = 2 for a unit Gaussian, so SE of the variance is √(2/n).
        assert!((var - 1.0).abs() < 4.0 * (2.0 / n as f64).sqrt(), "marginal var {var}");
    }

    #[test]
    fn latent_schedule_periods() {
        for t in 1..=3 {
            assert!(latent_schedule(t, 1));
        }
        assert!(latent_schedule(1, 8));
        assert!(latent_schedule(9, 8));
        assert!(latent_schedule(17, 8));
        for t in 2..=8 {
            assert!(!latent_schedule(t, 8));
        }
    }

    #[test]
    fn kl_terms_zero_for_matched_hl_and_shared_ll() {
        let stack = test_stack(10, PriorKind::IsoGaussian, true);
        let o = obs(vec![0.0; 4], vec![0.0, 0.0]);
        let hl = DiagGaussian::standard(3);
        let z = vec![0.1, 0.2, -0.3];
        let ll = ll_step(&stack, &z, &o).unwrap();
        let (kl_hl, kl_ll) = step_kl_terms(
            &stack,
            &o,
            &z,
            &[0.0; 3],
            &hl,
            &ll,
            &PriorKind::IsoGaussian,
            &DefaultLl::Shared,
        )
        .unwrap();
        assert!(kl_hl.abs() < 1e-14);
        assert_eq!(kl_ll, 0.0);
    }

    #[test]
    fn kl_terms_match_independent_recomputation() {
        let stack = test_stack(11, PriorKind::Ar1 { alpha: 0.5 }, false);
        let mut rng = SeedRng::seed_from_u64(12);
        let o = obs(
            (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let eps = NoiseDraw::standard(3, &mut rng);
        let (z, hl_dist) = hl_step(&stack, &o, &eps).unwrap();
        let ll_dist = ll_step(&stack, &z, &o).unwrap();
        let z_prev = vec![0.3, -0.2, 0.9];
        let (defaults_hl, defaults_ll) = stack.defaults();
        let (kl_hl, kl_ll) = step_kl_terms(
            &stack, &o, &z, &z_prev, &hl_dist, &ll_dist, &defaults_hl, &defaults_ll,
        )
        .unwrap();

        // Recompute from raw distribution parameters.
        let prior_mean: Vec<f64> = z_prev.iter().map(|&v| 0.5 * v).collect();
        let prior_sd = (1.0 - 0.25f64).sqrt();
        let mut want_hl = 0.0;
        for i in 0..3 {
            let (mp, sp) = (hl_dist.mean()[i], hl_dist.stddev()[i]);
            let dm = mp - prior_mean[i];
            want_hl += (prior_sd / sp).ln() + (sp * sp + dm * dm) / (2.0 * prior_sd * prior_sd)
                - 0.5;
        }
        assert!((kl_hl - want_hl).abs() < 1e-12);

        let d0 = default_ll_step(&stack, &defaults_ll, &z, &o).unwrap();
        if let (ActionDist::Categorical(p), ActionDist::Categorical(q)) = (&ll_dist, &d0) {
            let want_ll: f64 = p
                .probs()
                .iter()
                .zip(p.log_probs().iter().zip(q.log_probs().iter()))
                .map(|(pi, (lp, lq))| pi * (lp - lq))
                .sum();
            assert!((kl_ll - want_ll).abs() < 1e-12);
        } else {
            panic!("expected categorical LL");
        }
    }

    #[test]
    fn masked_out_features_do_not_affect_consumers() {
        let stack = test_stack(13, PriorKind::IsoGaussian, true);
        let base = obs(vec![0.1, 0.2, 0.3, 0.4], vec![0.5, 0.6]);
        let mut flipped = base.clone();
        flipped.internal = vec![-9.0, 9.0]; // HL may not read `internal`.
        let eps = NoiseDraw(vec![0.1, 0.2, 0.3]);
        let (z1, _) = hl_step(&stack, &base, &eps).unwrap();
        let (z2, _) = hl_step(&stack, &flipped, &eps).unwrap();
        assert!(z1.iter().zip(&z2).all(|(a, b)| a.to_bits() == b.to_bits()));

        let mut flipped_global = base.clone();
        flipped_global.global = vec![9.0, -9.0, 9.0, -9.0]; // LL may not read `global`.
        let z = vec![0.0, 0.1, 0.2];
        let a = ll_step(&stack, &z, &base).unwrap();
        let b = ll_step(&stack, &z, &flipped_global).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn default_masks_may_not_read_task() {
        let bad = AsymmetryMask::new(
            vec![ObsGroup::Task],
            vec![ObsGroup::Task],
            vec![ObsGroup::Task],
            vec![],
        );
        assert!(bad.is_err());
    }

    #[test]
    fn flat_stack_degenerates_gracefully() {
        let mut rng = SeedRng::seed_from_u64(14);
        let dims = GroupDims { proprio: 2, task: 2, internal: 0, global: 0 };
        let mask = AsymmetryMask::new(
            vec![ObsGroup::Proprio, ObsGroup::Task],
            vec![ObsGroup::Proprio, ObsGroup::Task],
            vec![],
            vec![ObsGroup::Proprio],
        )
        .unwrap();
        let hl_spec = MlpSpec::with_heads(
            vec![4, 0],
            Activation::Elu,
            vec![
                HeadSpec { name: "mean".into(), len: 0 },
                HeadSpec { name: "log_stddev".into(), len: 0 },
            ],
        )
        .unwrap();
        let ll_spec = gaussian_net_spec(4, &[6], 2, Activation::Elu).unwrap();
        let stack = PolicyStack {
            hl_params: ParamVector::init(&hl_spec, &mut rng),
            hl_spec,
            ll_params: ParamVector::init(&ll_spec, &mut rng),
            ll_spec,
            default_hl: PriorKind::IsoGaussian,
            default_ll: DefaultLl::Shared,
            latent_dim: 0,
            latent_period: 1,
            asymmetry: mask,
            action_space: ActionSpace::Continuous { dim: 2 },
            group_dims: dims,
            hl_mean_bound: None,
            ll_mean_bound: None,
        };
        stack.validate().unwrap();
        let o = ObservationBundle {
            proprio: vec![0.1, 0.2],
            task: vec![1.0, 0.0],
            internal: vec![],
            global: vec![],
        };
        let (z, hl_dist) = hl_step(&stack, &o, &NoiseDraw::zeros(0)).unwrap();
        assert!(z.is_empty());
        assert_eq!(hl_dist.dim(), 0);
        let ll = ll_step(&stack, &z, &o).unwrap();
        let (kl_hl, kl_ll) = step_kl_terms(
            &stack,
            &o,
            &z,
            &[],
            &hl_dist,
            &ll,
            &PriorKind::IsoGaussian,
            &DefaultLl::Shared,
        )
        .unwrap();
        assert_eq!(kl_hl, 0.0);
        assert_eq!(kl_ll, 0.0);
    }

    #[test]
    fn latent_state_holds_between_resamples() {
        let mut ls = LatentState::begin_episode(2, 4);
        assert!(ls.advance()); // t = 1
        ls.install(vec![1.0, 2.0]);
        assert_eq!(ls.z_prev, vec![0.0, 0.0]);
        for _ in 0..3 {
            assert!(!ls.advance()); // t = 2, 3, 4
            assert_eq!(ls.z, vec![1.0, 2.0]);
        }
        assert!(ls.advance()); // t = 5
        ls.install(vec![3.0, 4.0]);
        assert_eq!(ls.z_prev, vec![1.0, 2.0]);
    }
}
