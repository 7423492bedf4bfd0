//! The three parameter-update procedures: hierarchical SVG(0) with replay
//! and Retrace for continuous actions, V-trace actor-critic with infrequent
//! latents for discrete actions, and the on-policy reference learner; plus
//! the default-policy distillation loss.
//!
//! Gradient contract: the latent is live only along the action path (the
//! reparameterized action backpropagates through the low-level input into
//! the high-level policy). It is held constant in the value function's
//! latent argument and in every KL/entropy regularizer; learning through
//! the value function's latent conditioning destabilizes training. Loss
//! evaluators accept explicit frozen-latent overrides so finite-difference
//! oracles can check exactly this contract.
//!
//! Gradient isolation: policy losses touch only θ (high + low level),
//! value losses only ψ, distillation only φ. A learner owns its state
//! exclusively; updates are strictly sequential.

use rand::Rng;

use crate::dist::{
    entropy_categorical_grad, kl_categorical, kl_categorical_grad_p, kl_categorical_grad_q,
    kl_diag_gaussian, kl_diag_gaussian_grads, log_prob_categorical_grad, sample_reparam,
    DiagGaussian, NoiseDraw,
};
use crate::error::{Error, Result};
use crate::mlp::{self, adam_step, AdamState, Direction, MlpSpec, ParamVector};
use crate::objective::RegularizerConfig;
use crate::offpolicy::{
    retrace_targets, traces, vtrace_targets, ReplaySegment, TargetSync, TraceConfig,
};
use crate::policy::{
    cat_backward_accumulate, cat_eval, default_hl_step, gauss_backward_accumulate, gauss_eval,
    gauss_eval_bounded, hl_eval, latent_schedule, ActionRecord, ActionSpace, CatEval, Consumer,
    DefaultLl, GaussEval, LlEval, PolicyStack, PriorKind,
};

/// Which parameter groups a transfer run keeps fixed. Frozen groups receive
/// exactly zero gradient and are never stepped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrozenSet {
    pub hl: bool,
    pub ll: bool,
    pub default_hl: bool,
    pub default_ll: bool,
}

/// Learner hyperparameters.
#[derive(Debug, Clone)]
pub struct LearnerConfig {
    pub beta_pi: f64,
    pub beta_q: f64,
    pub beta_pi0: f64,
    pub reg: RegularizerConfig,
    pub batch_size: usize,
    pub unroll_len: usize,
    pub target_period: u64,
    pub trace: TraceConfig,
    /// Number of reparameterized samples for action-value expectations.
    pub q_samples: usize,
    pub frozen: FrozenSet,
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        self.reg.validate()?;
        self.trace.validate()?;
        if self.beta_pi <= 0.0 || self.beta_q <= 0.0 || self.beta_pi0 <= 0.0 {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.batch_size == 0 || self.unroll_len == 0 || self.q_samples == 0 {
            return Err(Error::config("batch, unroll, and sample counts must be >= 1"));
        }
        Ok(())
    }
}

/// Online parameters, target copies, optimizer state, and update counters.
#[derive(Debug, Clone)]
pub struct LearnerState {
    pub stack: PolicyStack,
    pub value_spec: MlpSpec,
    pub value_params: ParamVector,
    pub target_hl: ParamVector,
    pub target_ll: ParamVector,
    pub target_default_hl: PriorKind,
    pub target_default_ll: DefaultLl,
    pub target_value: ParamVector,
    pub opt_hl: AdamState,
    pub opt_ll: AdamState,
    pub opt_prior: Option<AdamState>,
    pub opt_dll: Option<AdamState>,
    pub opt_value: AdamState,
    pub sync: TargetSync,
    pub updates: u64,
}

/// Builds the critic spec for a stack: the action value `Q(a, z, x)` for
/// continuous stacks, the state value `V(z, x)` for discrete ones. The
/// critic always reads the full-information (high-level) view.
pub fn build_value_spec(stack: &PolicyStack, hidden: &[usize]) -> Result<MlpSpec> {
    let view = stack.asymmetry.view_dim(Consumer::Hl, &stack.group_dims);
    let input = match stack.action_space {
        ActionSpace::Continuous { dim } => view + stack.latent_dim + dim,
        ActionSpace::Discrete { .. } => view + stack.latent_dim,
    };
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(1);
    MlpSpec::new(sizes, stack.hl_spec.activation)
}

impl LearnerState {
    /// Target copies start equal to the online parameters.
    pub fn new(
        stack: PolicyStack,
        value_spec: MlpSpec,
        value_params: ParamVector,
        cfg: &LearnerConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        stack.validate()?;
        if value_params.len() != value_spec.num_params() {
            return Err(Error::config("value params do not match spec"));
        }
        let opt_prior = match &stack.default_hl {
            PriorKind::ArLearned { params, .. } => {
                Some(AdamState::new(params.len(), cfg.beta_pi0))
            }
            _ => None,
        };
        let opt_dll = match &stack.default_ll {
            DefaultLl::Separate { params, .. } => Some(AdamState::new(params.len(), cfg.beta_pi0)),
            DefaultLl::Shared => None,
        };
        Ok(LearnerState {
            target_hl: stack.hl_params.clone(),
            target_ll: stack.ll_params.clone(),
            target_default_hl: stack.default_hl.clone(),
            target_default_ll: stack.default_ll.clone(),
            target_value: value_params.clone(),
            opt_hl: AdamState::new(stack.hl_params.len(), cfg.beta_pi),
            opt_ll: AdamState::new(stack.ll_params.len(), cfg.beta_pi),
            opt_prior,
            opt_dll,
            opt_value: AdamState::new(value_params.len(), cfg.beta_q),
            sync: TargetSync::new(cfg.target_period),
            updates: 0,
            stack,
            value_spec,
            value_params,
        })
    }

    /// Copies every online parameter group into its target slot.
    pub fn sync_targets(&mut self) {
        self.target_hl.copy_from(&self.stack.hl_params);
        self.target_ll.copy_from(&self.stack.ll_params);
        self.target_default_hl = self.stack.default_hl.clone();
        self.target_default_ll = self.stack.default_ll.clone();
        self.target_value.copy_from(&self.value_params);
    }

    fn tick_target_sync(&mut self) -> bool {
        if self.sync.tick() {
            self.sync_targets();
            true
        } else {
            false
        }
    }
}

/// Scalars emitted by every update.
#[derive(Debug, Clone, Copy, Default)]
pub struct Diagnostics {
    pub mean_reward: f64,
    pub kl_hl: f64,
    pub kl_ll: f64,
    pub entropy: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub distill_loss: f64,
    /// True when a non-finite loss or gradient rejected the whole update.
    pub skipped: bool,
}

/// Noise draws for one SVG(0)/on-policy update, drawn up front so loss
/// evaluations are deterministic functions of the parameters.
/// Index layout: `eps[b][slot]` and `xi[b][slot][m]` with slot `0..=n`
/// (the last slot belongs to the bootstrap observation).
#[derive(Debug, Clone)]
pub struct Svg0Noises {
    pub eps: Vec<Vec<Vec<f64>>>,
    pub xi: Vec<Vec<Vec<Vec<f64>>>>,
}

pub fn svg0_draw_noises<R: Rng>(
    batch: &[ReplaySegment],
    latent_dim: usize,
    action_dim: usize,
    m: usize,
    rng: &mut R,
) -> Svg0Noises {
    let mut eps = Vec::with_capacity(batch.len());
    let mut xi = Vec::with_capacity(batch.len());
    for seg in batch {
        let slots = seg.valid_len + 1;
        eps.push((0..slots).map(|_| NoiseDraw::standard(latent_dim, rng).0).collect());
        xi.push(
            (0..slots)
                .map(|_| (0..m).map(|_| NoiseDraw::standard(action_dim, rng).0).collect())
                .collect(),
        );
    }
    Svg0Noises { eps, xi }
}

fn continuous_action_dim(stack: &PolicyStack) -> Result<usize> {
    match stack.action_space {
        ActionSpace::Continuous { dim } => Ok(dim),
        ActionSpace::Discrete { .. } => {
            Err(Error::config("this learner requires a continuous action space"))
        }
    }
}

fn critic_input(stack: &PolicyStack, obs: &crate::policy::ObservationBundle, z: &[f64], a: Option<&[f64]>) -> Vec<f64> {
    let mut input = stack.asymmetry.view(Consumer::Hl, obs);
    input.extend_from_slice(z);
    if let Some(a) = a {
        input.extend_from_slice(a);
    }
    input
}

/// Per-step KL terms against a given default parameter set, evaluated from
/// already-computed agent distributions at a fixed latent.
fn kl_against(
    stack: &PolicyStack,
    obs: &crate::policy::ObservationBundle,
    hl_dist: &DiagGaussian,
    ll: &LlEval,
    z: &[f64],
    z_prev: &[f64],
    default_hl: &PriorKind,
    default_ll: &DefaultLl,
) -> Result<(f64, f64)> {
    let prior = default_hl_step(default_hl, z_prev, stack.latent_dim, stack.hl_mean_bound)?;
    let kl_hl = kl_diag_gaussian(hl_dist, &prior)?;
    let kl_ll = match default_ll {
        DefaultLl::Shared => 0.0,
        DefaultLl::Separate { spec, params } => {
            let mut input = stack.asymmetry.view(Consumer::DefaultLl, obs);
            input.extend_from_slice(z);
            match ll {
                LlEval::Gaussian(agent) => {
                    kl_diag_gaussian(&agent.dist, &gauss_eval(spec, params, &input)?.dist)?
                }
                LlEval::Categorical(agent) => {
                    kl_categorical(&agent.dist, &cat_eval(spec, params, &input)?.dist)?
                }
            }
        }
    };
    Ok((kl_hl, kl_ll))
}

/// Gradient buffers for one update, grouped by parameter family.
struct GradBank {
    hl: ParamVector,
    ll: ParamVector,
    prior: Option<ParamVector>,
    dll: Option<ParamVector>,
    value: ParamVector,
    scratch: ParamVector,
}

impl GradBank {
    fn new(state: &LearnerState) -> Self {
        GradBank {
            hl: ParamVector::zeros(&state.stack.hl_spec),
            ll: ParamVector::zeros(&state.stack.ll_spec),
            prior: match &state.stack.default_hl {
                PriorKind::ArLearned { spec, .. } => Some(ParamVector::zeros(spec)),
                _ => None,
            },
            dll: match &state.stack.default_ll {
                DefaultLl::Separate { spec, .. } => Some(ParamVector::zeros(spec)),
                DefaultLl::Shared => None,
            },
            value: ParamVector::zeros(&state.value_spec),
            scratch: ParamVector::zeros(&state.value_spec),
        }
    }

    fn all_finite(&self) -> bool {
        self.hl.all_finite()
            && self.ll.all_finite()
            && self.prior.as_ref().map_or(true, |g| g.all_finite())
            && self.dll.as_ref().map_or(true, |g| g.all_finite())
            && self.value.all_finite()
    }
}

/// Applies the accumulated gradients: ascent on θ, descent on ψ and φ.
/// Frozen groups are skipped entirely.
fn apply_updates(state: &mut LearnerState, bank: &GradBank, frozen: &FrozenSet) -> Result<()> {
    if !frozen.hl {
        adam_step(&mut state.opt_hl, &mut state.stack.hl_params, &bank.hl, Direction::Ascent)?;
    }
    if !frozen.ll {
        adam_step(&mut state.opt_ll, &mut state.stack.ll_params, &bank.ll, Direction::Ascent)?;
    }
    apply_default_updates(state, bank, frozen)?;
    adam_step(&mut state.opt_value, &mut state.value_params, &bank.value, Direction::Descent)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// SVG(0) with replay and Retrace (continuous actions)
// ---------------------------------------------------------------------------

/// Per-slot evaluation shared by the update and the loss oracle.
struct ContSlot {
    hl: GaussEval,
    /// Latent used in the stopped paths (equals the live sample unless
    /// overridden by a finite-difference oracle).
    z_reg: Vec<f64>,
    /// LL at the live latent (action path).
    ll_live: GaussEval,
    /// LL at the stopped latent (regularizer path); reused from `ll_live`
    /// when the latents coincide.
    ll_reg: Option<GaussEval>,
    actions: Vec<Vec<f64>>,
    q_traces: Vec<mlp::ForwardTrace>,
    qpol: f64,
    kl_hl: f64,
    kl_ll: f64,
    entropy: f64,
}

struct ContEval<'a> {
    seg: &'a ReplaySegment,
    slots: Vec<ContSlot>,
    /// Target-Q at the stored behavior action, per real step.
    q_behavior: Vec<f64>,
    log_pi: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn eval_continuous_segment<'a>(
    stack: &PolicyStack,
    value_spec: &MlpSpec,
    value_params: &ParamVector,
    default_hl: &PriorKind,
    default_ll: &DefaultLl,
    seg: &'a ReplaySegment,
    eps: &[Vec<f64>],
    xi: &[Vec<Vec<f64>>],
    frozen_z: Option<&[Vec<f64>]>,
    with_behavior: bool,
) -> Result<ContEval<'a>> {
    seg.validate()?;
    let n = seg.valid_len;
    let slots = if seg.terminal { n } else { n + 1 };
    let mut out = ContEval { seg, slots: Vec::with_capacity(slots), q_behavior: Vec::new(), log_pi: Vec::new() };
    let mut z_prev_reg = vec![0.0; stack.latent_dim];
    for slot in 0..slots {
        let obs = if slot < n { &seg.obs[slot] } else { &seg.bootstrap_obs };
        let hl = hl_eval(stack, obs)?;
        let z_live = sample_reparam(&hl.dist, &NoiseDraw(eps[slot].clone()))?;
        let z_reg = match frozen_z {
            Some(f) => f[slot].clone(),
            None => z_live.clone(),
        };
        let mut ll_input = stack.asymmetry.view(Consumer::Ll, obs);
        ll_input.extend_from_slice(&z_live);
        let ll_live =
            gauss_eval_bounded(&stack.ll_spec, &stack.ll_params, &ll_input, stack.ll_mean_bound)?;
        let ll_reg = if z_reg == z_live {
            None
        } else {
            let mut input = stack.asymmetry.view(Consumer::Ll, obs);
            input.extend_from_slice(&z_reg);
            Some(gauss_eval_bounded(
                &stack.ll_spec,
                &stack.ll_params,
                &input,
                stack.ll_mean_bound,
            )?)
        };
        let reg_eval = ll_reg.as_ref().unwrap_or(&ll_live);

        let mut actions = Vec::with_capacity(xi[slot].len());
        let mut q_traces = Vec::with_capacity(xi[slot].len());
        let mut qpol = 0.0;
        for draw in &xi[slot] {
            let a = sample_reparam(&ll_live.dist, &NoiseDraw(draw.clone()))?;
            let input = critic_input(stack, obs, &z_reg, Some(&a));
            let trace = mlp::forward_traced(value_spec, value_params, &input)?;
            qpol += trace.output()[0];
            actions.push(a);
            q_traces.push(trace);
        }
        qpol /= xi[slot].len() as f64;

        let (kl_hl, kl_ll) = kl_against(
            stack,
            obs,
            &hl.dist,
            &LlEval::Gaussian(reg_eval.clone()),
            &z_reg,
            &z_prev_reg,
            default_hl,
            default_ll,
        )?;
        let entropy = reg_eval.dist.entropy();

        if slot < n {
            if with_behavior {
                let a = match &seg.actions[slot] {
                    ActionRecord::Continuous(a) => a.clone(),
                    ActionRecord::Discrete(_) => {
                        return Err(Error::usage("continuous learner got a discrete action"))
                    }
                };
                let input = critic_input(stack, obs, &z_reg, Some(&a));
                out.q_behavior.push(mlp::forward(value_spec, value_params, &input)?[0]);
                out.log_pi.push(reg_eval.dist.log_prob(&a)?);
            }
        }
        z_prev_reg = z_reg.clone();
        out.slots.push(ContSlot {
            hl,
            z_reg,
            ll_live,
            ll_reg,
            actions,
            q_traces,
            qpol,
            kl_hl,
            kl_ll,
            entropy,
        });
    }
    Ok(out)
}

fn policy_loss_of(eval: &ContEval, reg: &RegularizerConfig) -> f64 {
    let n = eval.seg.valid_len;
    eval.slots[..n]
        .iter()
        .map(|s| s.qpol - reg.alpha * (s.kl_hl + s.kl_ll) + reg.alpha_h * s.entropy)
        .sum()
}

/// The latents each slot would use at the current parameters, for freezing
/// in finite-difference oracles.
pub fn svg0_base_latents(
    state: &LearnerState,
    batch: &[ReplaySegment],
    noises: &Svg0Noises,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut out = Vec::with_capacity(batch.len());
    for (b, seg) in batch.iter().enumerate() {
        let eval = eval_continuous_segment(
            &state.stack,
            &state.value_spec,
            &state.target_value,
            &state.target_default_hl,
            &state.target_default_ll,
            seg,
            &noises.eps[b],
            &noises.xi[b],
            None,
            false,
        )?;
        out.push(eval.slots.iter().map(|s| s.z_reg.clone()).collect());
    }
    Ok(out)
}

/// The analytic θ-gradient (high level, low level) of the SVG(0) policy
/// objective, without applying it. Verification surface for the
/// finite-difference oracles.
pub fn svg0_policy_gradients(
    state: &LearnerState,
    batch: &[ReplaySegment],
    cfg: &LearnerConfig,
    noises: &Svg0Noises,
) -> Result<(ParamVector, ParamVector)> {
    let scale = 1.0 / batch.len() as f64;
    let mut bank = GradBank::new(state);
    for (b, seg) in batch.iter().enumerate() {
        let eval = eval_continuous_segment(
            &state.stack,
            &state.value_spec,
            &state.target_value,
            &state.target_default_hl,
            &state.target_default_ll,
            seg,
            &noises.eps[b],
            &noises.xi[b],
            None,
            false,
        )?;
        accumulate_policy_grads(
            &state.stack,
            &state.value_spec,
            &state.target_value,
            &state.target_default_hl,
            &eval,
            &noises.eps[b],
            &cfg.reg,
            scale,
            &mut bank,
        )?;
    }
    Ok((bank.hl, bank.ll))
}

/// The SVG(0) policy objective value for a batch under fixed noise, with
/// the stopped latent slots optionally overridden. With `frozen_z` set to
/// the base-point latents, central differences of this function match the
/// analytic policy gradient; without it they also capture the (rejected)
/// paths through the latent, so the two must differ.
pub fn svg0_policy_loss(
    state: &LearnerState,
    batch: &[ReplaySegment],
    cfg: &LearnerConfig,
    noises: &Svg0Noises,
    frozen_z: Option<&[Vec<Vec<f64>>]>,
) -> Result<f64> {
    let mut total = 0.0;
    for (b, seg) in batch.iter().enumerate() {
        let eval = eval_continuous_segment(
            &state.stack,
            &state.value_spec,
            &state.target_value,
            &state.target_default_hl,
            &state.target_default_ll,
            seg,
            &noises.eps[b],
            &noises.xi[b],
            frozen_z.map(|f| f[b].as_slice()),
            false,
        )?;
        total += policy_loss_of(&eval, &cfg.reg);
    }
    Ok(total / batch.len() as f64)
}

/// Accumulates the θ-gradient of the policy objective for one evaluated
/// segment (ascent direction), following the latent stop-gradient contract.
fn accumulate_policy_grads(
    stack: &PolicyStack,
    value_spec: &MlpSpec,
    value_params: &ParamVector,
    target_default_hl: &PriorKind,
    eval: &ContEval,
    eps: &[Vec<f64>],
    reg: &RegularizerConfig,
    scale: f64,
    bank: &mut GradBank,
) -> Result<()> {
    let n = eval.seg.valid_len;
    let action_dim = continuous_action_dim(stack)?;
    let mut z_prev = vec![0.0; stack.latent_dim];
    for (slot_idx, slot) in eval.slots[..n].iter().enumerate() {
        let m = slot.actions.len() as f64;
        // Action path: ∂Q/∂a through each reparameterized sample.
        let mut d_mean_act = vec![0.0; action_dim];
        let mut d_std_act = vec![0.0; action_dim];
        let mut d_z = vec![0.0; stack.latent_dim];
        for (a_idx, trace) in slot.q_traces.iter().enumerate() {
            let d_input = mlp::backward_accumulate(
                value_spec,
                value_params,
                trace,
                &[scale / m],
                &mut bank.scratch,
            )?;
            // Critic input layout: [view, z, a]; the z slice is stopped.
            let a_off = d_input.len() - action_dim;
            let d_a = &d_input[a_off..];
            let xi = &slot.actions[a_idx];
            for i in 0..action_dim {
                d_mean_act[i] += d_a[i];
                // a = μ + σ ξ, so ∂a/∂σ is the drawn noise.
                let noise = (xi[i] - slot.ll_live.dist.mean()[i])
                    / slot.ll_live.dist.stddev()[i];
                d_std_act[i] += d_a[i] * noise;
            }
        }
        let d_ll_in = gauss_backward_accumulate(
            &stack.ll_spec,
            &stack.ll_params,
            &slot.ll_live,
            &d_mean_act,
            &d_std_act,
            &mut bank.ll,
        )?;
        let z_off = d_ll_in.len() - stack.latent_dim;
        for (dz, v) in d_z.iter_mut().zip(&d_ll_in[z_off..]) {
            *dz += v;
        }

        // Regularizer path at the stopped latent: −α·KL + α_H·entropy.
        let prior = default_hl_step(target_default_hl, &z_prev, stack.latent_dim, stack.hl_mean_bound)?;
        let (d_mu_p, d_sd_p, _, _) = kl_diag_gaussian_grads(&slot.hl.dist, &prior)?;
        let reg_eval = slot.ll_reg.as_ref().unwrap_or(&slot.ll_live);
        let mut d_mean_reg = vec![0.0; action_dim];
        let mut d_std_reg: Vec<f64> = reg_eval
            .dist
            .stddev()
            .iter()
            .map(|s| reg.alpha_h * scale / s)
            .collect();
        // Separate default: the agent-side KL gradient flows into θ_LL.
        // (The default side flows into φ during distillation only.)
        if let Some((agent_mu, agent_sd)) = kl_ll_agent_grads(stack, eval.seg, slot_idx, slot)? {
            for i in 0..action_dim {
                d_mean_reg[i] -= reg.alpha * scale * agent_mu[i];
                d_std_reg[i] -= reg.alpha * scale * agent_sd[i];
            }
        }
        gauss_backward_accumulate(
            &stack.ll_spec,
            &stack.ll_params,
            reg_eval,
            &d_mean_reg,
            &d_std_reg,
            &mut bank.ll,
        )?;

        // High level: the live-action path plus the analytic KL term.
        let mut d_mu_h = vec![0.0; stack.latent_dim];
        let mut d_sd_h = vec![0.0; stack.latent_dim];
        for i in 0..stack.latent_dim {
            d_mu_h[i] = d_z[i] - reg.alpha * scale * d_mu_p[i];
            d_sd_h[i] = d_z[i] * eps[slot_idx][i] - reg.alpha * scale * d_sd_p[i];
        }
        gauss_backward_accumulate(
            &stack.hl_spec,
            &stack.hl_params,
            &slot.hl,
            &d_mu_h,
            &d_sd_h,
            &mut bank.hl,
        )?;
        z_prev = slot.z_reg.clone();
    }
    Ok(())
}

/// Agent-side gradients of the separate-LL KL at the stopped latent.
fn kl_ll_agent_grads(
    stack: &PolicyStack,
    seg: &ReplaySegment,
    slot_idx: usize,
    slot: &ContSlot,
) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    if let DefaultLl::Separate { spec, params } = &stack.default_ll {
        let obs = if slot_idx < seg.valid_len { &seg.obs[slot_idx] } else { &seg.bootstrap_obs };
        let mut input = stack.asymmetry.view(Consumer::DefaultLl, obs);
        input.extend_from_slice(&slot.z_reg);
        let d0 = gauss_eval_bounded(spec, params, &input, stack.ll_mean_bound)?;
        let agent = slot.ll_reg.as_ref().unwrap_or(&slot.ll_live);
        let (dmp, dsp, _, _) = kl_diag_gaussian_grads(&agent.dist, &d0.dist)?;
        Ok(Some((dmp, dsp)))
    } else {
        Ok(None)
    }
}

/// Distillation bookkeeping shared by the continuous learners: descends
/// `Σ KL̂ᴰ` with respect to φ only (the agent side is stopped).
#[allow(clippy::too_many_arguments)]
fn accumulate_distill_grads(
    stack: &PolicyStack,
    eval: &ContEval,
    scale: f64,
    bank: &mut GradBank,
    distill_loss: &mut f64,
) -> Result<()> {
    let n = eval.seg.valid_len;
    let mut z_prev = vec![0.0; stack.latent_dim];
    for (slot_idx, slot) in eval.slots[..n].iter().enumerate() {
        let obs = &eval.seg.obs[slot_idx];
        // High-level term against the online prior.
        match &stack.default_hl {
            PriorKind::IsoGaussian | PriorKind::Ar1 { .. } => {
                let prior =
                    default_hl_step(&stack.default_hl, &z_prev, stack.latent_dim, stack.hl_mean_bound)?;
                *distill_loss += scale * kl_diag_gaussian(&slot.hl.dist, &prior)?;
            }
            PriorKind::ArLearned { spec, params } => {
                let prior_eval = gauss_eval_bounded(spec, params, &z_prev, stack.hl_mean_bound)?;
                *distill_loss += scale * kl_diag_gaussian(&slot.hl.dist, &prior_eval.dist)?;
                let (_, _, d_mu_q, d_sd_q) =
                    kl_diag_gaussian_grads(&slot.hl.dist, &prior_eval.dist)?;
                let d_mu: Vec<f64> = d_mu_q.iter().map(|g| g * scale).collect();
                let d_sd: Vec<f64> = d_sd_q.iter().map(|g| g * scale).collect();
                gauss_backward_accumulate(
                    spec,
                    params,
                    &prior_eval,
                    &d_mu,
                    &d_sd,
                    bank.prior.as_mut().expect("prior grads allocated"),
                )?;
            }
        }
        // Low-level term against the online separate default, if any.
        if let DefaultLl::Separate { spec, params } = &stack.default_ll {
            let mut input = stack.asymmetry.view(Consumer::DefaultLl, obs);
            input.extend_from_slice(&slot.z_reg);
            let d0 = gauss_eval_bounded(spec, params, &input, stack.ll_mean_bound)?;
            let agent = slot.ll_reg.as_ref().unwrap_or(&slot.ll_live);
            *distill_loss += scale * kl_diag_gaussian(&agent.dist, &d0.dist)?;
            let (_, _, d_mu_q, d_sd_q) = kl_diag_gaussian_grads(&agent.dist, &d0.dist)?;
            let d_mu: Vec<f64> = d_mu_q.iter().map(|g| g * scale).collect();
            let d_sd: Vec<f64> = d_sd_q.iter().map(|g| g * scale).collect();
            gauss_backward_accumulate(
                spec,
                params,
                &d0,
                &d_mu,
                &d_sd,
                bank.dll.as_mut().expect("default-ll grads allocated"),
            )?;
        }
        z_prev = slot.z_reg.clone();
    }
    Ok(())
}

/// One hierarchical SVG(0) update from replayed segments. Fresh latents are
/// sampled per step; KL regularizers are evaluated against the target
/// defaults (φ′), distillation against the online defaults (φ); Retrace
/// estimates the action-value targets with the target critic (ψ′)
/// throughout; the policy gradient flows through the reparameterized action
/// only. Requires a continuous action space and latent period 1.
pub fn svg0_update(
    state: &mut LearnerState,
    batch: &[ReplaySegment],
    cfg: &LearnerConfig,
    rng: &mut crate::SeedRng,
) -> Result<Diagnostics> {
    cfg.validate()?;
    let action_dim = continuous_action_dim(&state.stack)?;
    if cfg.reg.latent_period != 1 || state.stack.latent_period != 1 {
        return Err(Error::config("the continuous learner uses latent period 1"));
    }
    if batch.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    let noises = svg0_draw_noises(batch, state.stack.latent_dim, action_dim, cfg.q_samples, rng);
    svg0_update_with_noises(state, batch, cfg, &noises)
}

/// Deterministic core of [`svg0_update`]; exposed for oracle tests.
pub fn svg0_update_with_noises(
    state: &mut LearnerState,
    batch: &[ReplaySegment],
    cfg: &LearnerConfig,
    noises: &Svg0Noises,
) -> Result<Diagnostics> {
    let scale = 1.0 / batch.len() as f64;
    let mut bank = GradBank::new(state);
    let mut diag = Diagnostics::default();
    let mut step_count = 0usize;

    let trainable_defaults =
        state.stack.default_hl.is_trainable() || matches!(state.stack.default_ll, DefaultLl::Separate { .. });

    for (b, seg) in batch.iter().enumerate() {
        let eval = eval_continuous_segment(
            &state.stack,
            &state.value_spec,
            &state.target_value,
            &state.target_default_hl,
            &state.target_default_ll,
            seg,
            &noises.eps[b],
            &noises.xi[b],
            None,
            true,
        )?;
        let n = seg.valid_len;
        step_count += n;

        // Retrace targets from target-critic quantities.
        let rewards = &seg.rewards[..n];
        let kl_of = |slot: &ContSlot| slot.kl_hl + slot.kl_ll;
        let mut vhat_next = Vec::with_capacity(n);
        let mut kl_next = Vec::with_capacity(n);
        for i in 0..n {
            if i + 1 < n {
                vhat_next.push(eval.slots[i + 1].qpol);
                kl_next.push(kl_of(&eval.slots[i + 1]));
            } else if seg.terminal {
                vhat_next.push(0.0);
                kl_next.push(0.0);
            } else {
                vhat_next.push(eval.slots[n].qpol);
                kl_next.push(kl_of(&eval.slots[n]));
            }
        }
        let c = traces(&eval.log_pi, &seg.behavior_log_probs[..n], cfg.trace.lambda)?;
        let q_targets = retrace_targets(
            rewards,
            &eval.q_behavior,
            &vhat_next,
            &kl_next,
            cfg.reg.gamma,
            cfg.reg.alpha,
            &c,
        )?;

        // Policy objective (ascent on θ).
        diag.policy_loss += scale * policy_loss_of(&eval, &cfg.reg);
        accumulate_policy_grads(
            &state.stack,
            &state.value_spec,
            &state.target_value,
            &state.target_default_hl,
            &eval,
            &noises.eps[b],
            &cfg.reg,
            scale,
            &mut bank,
        )?;

        // Critic loss Σ (Q̂ᴿ − Q_ψ)² (descent on ψ), at the stored actions.
        for i in 0..n {
            let a = match &seg.actions[i] {
                ActionRecord::Continuous(a) => a.clone(),
                ActionRecord::Discrete(_) => unreachable!("validated above"),
            };
            let input = critic_input(&state.stack, &seg.obs[i], &eval.slots[i].z_reg, Some(&a));
            let trace = mlp::forward_traced(&state.value_spec, &state.value_params, &input)?;
            let q = trace.output()[0];
            let err = q - q_targets[i];
            diag.value_loss += scale * err * err;
            mlp::backward_accumulate(
                &state.value_spec,
                &state.value_params,
                &trace,
                &[2.0 * err * scale],
                &mut bank.value,
            )?;
        }

        // Distillation Σ KL̂ᴰ (descent on φ) against the online defaults.
        if trainable_defaults {
            accumulate_distill_grads(&state.stack, &eval, scale, &mut bank, &mut diag.distill_loss)?;
        } else {
            // No trainable default parameters: the distillation loss equals
            // the shaping KL and the update is a no-op.
            diag.distill_loss +=
                scale * eval.slots[..n].iter().map(|s| s.kl_hl + s.kl_ll).sum::<f64>();
        }

        for slot in &eval.slots[..n] {
            diag.kl_hl += slot.kl_hl;
            diag.kl_ll += slot.kl_ll;
            diag.entropy += slot.entropy;
        }
        diag.mean_reward += rewards.iter().sum::<f64>();
    }

    let denom = step_count.max(1) as f64;
    diag.mean_reward /= denom;
    diag.kl_hl /= denom;
    diag.kl_ll /= denom;
    diag.entropy /= denom;

    let finite = diag.policy_loss.is_finite()
        && diag.value_loss.is_finite()
        && diag.distill_loss.is_finite()
        && bank.all_finite();
    if !finite {
        diag.skipped = true;
        return Ok(diag);
    }
    apply_updates(state, &bank, &cfg.frozen)?;
    state.updates += 1;
    state.tick_target_sync();
    Ok(diag)
}

// ---------------------------------------------------------------------------
// On-policy reference learner
// ---------------------------------------------------------------------------

/// The on-policy reference update: K-step regularized returns with a
/// bootstrap from the online critic, no target parameters, no traces, no
/// entropy bonus. The rollout must come from the current policy.
pub fn onpolicy_update(
    state: &mut LearnerState,
    rollout: &ReplaySegment,
    cfg: &LearnerConfig,
    rng: &mut crate::SeedRng,
) -> Result<Diagnostics> {
    cfg.validate()?;
    let action_dim = continuous_action_dim(&state.stack)?;
    let noises =
        svg0_draw_noises(std::slice::from_ref(rollout), state.stack.latent_dim, action_dim, cfg.q_samples, rng);
    onpolicy_update_with_noises(state, rollout, cfg, &noises)
}

/// Deterministic core of [`onpolicy_update`].
pub fn onpolicy_update_with_noises(
    state: &mut LearnerState,
    rollout: &ReplaySegment,
    cfg: &LearnerConfig,
    noises: &Svg0Noises,
) -> Result<Diagnostics> {
    let mut bank = GradBank::new(state);
    let mut diag = Diagnostics::default();
    // Everything online: critic ψ and defaults φ.
    let (online_hl, online_ll) = state.stack.defaults();
    let eval = eval_continuous_segment(
        &state.stack,
        &state.value_spec,
        &state.value_params,
        &online_hl,
        &online_ll,
        rollout,
        &noises.eps[0],
        &noises.xi[0],
        None,
        true,
    )?;
    let n = rollout.valid_len;

    // Q̂_t = Σ_{i≥t} γ^{i−t} (r_i − α·KL̂_i) + γ^{n−t} V̂ with
    // V̂ = E_π Q − α·KL̂ at the bootstrap observation (0 at terminals).
    let vhat = if rollout.terminal {
        0.0
    } else {
        eval.slots[n].qpol - cfg.reg.alpha * (eval.slots[n].kl_hl + eval.slots[n].kl_ll)
    };
    let mut q_targets = vec![0.0; n];
    let mut acc = vhat;
    for t in (0..n).rev() {
        let kl_t = eval.slots[t].kl_hl + eval.slots[t].kl_ll;
        acc = rollout.rewards[t] - cfg.reg.alpha * kl_t + cfg.reg.gamma * acc;
        q_targets[t] = acc;
    }

    let reg_no_entropy = RegularizerConfig { alpha_h: 0.0, ..cfg.reg };
    diag.policy_loss = policy_loss_of(&eval, &reg_no_entropy);
    accumulate_policy_grads(
        &state.stack,
        &state.value_spec,
        &state.value_params,
        &online_hl,
        &eval,
        &noises.eps[0],
        &reg_no_entropy,
        1.0,
        &mut bank,
    )?;

    for i in 0..n {
        let a = match &rollout.actions[i] {
            ActionRecord::Continuous(a) => a.clone(),
            ActionRecord::Discrete(_) => return Err(Error::usage("continuous learner")),
        };
        let input = critic_input(&state.stack, &rollout.obs[i], &eval.slots[i].z_reg, Some(&a));
        let trace = mlp::forward_traced(&state.value_spec, &state.value_params, &input)?;
        let err = trace.output()[0] - q_targets[i];
        diag.value_loss += err * err;
        mlp::backward_accumulate(
            &state.value_spec,
            &state.value_params,
            &trace,
            &[2.0 * err],
            &mut bank.value,
        )?;
    }

    accumulate_distill_grads(&state.stack, &eval, 1.0, &mut bank, &mut diag.distill_loss)?;

    for slot in &eval.slots[..n] {
        diag.kl_hl += slot.kl_hl / n as f64;
        diag.kl_ll += slot.kl_ll / n as f64;
        diag.entropy += slot.entropy / n as f64;
    }
    diag.mean_reward = rollout.rewards[..n].iter().sum::<f64>() / n as f64;

    if !(diag.policy_loss.is_finite() && diag.value_loss.is_finite() && bank.all_finite()) {
        diag.skipped = true;
        return Ok(diag);
    }
    apply_updates(state, &bank, &cfg.frozen)?;
    state.updates += 1;
    Ok(diag)
}

/// Policy objective value for the on-policy learner (online critic and
/// defaults), for finite-difference oracles.
pub fn onpolicy_policy_loss(
    state: &LearnerState,
    rollout: &ReplaySegment,
    cfg: &LearnerConfig,
    noises: &Svg0Noises,
    frozen_z: Option<&[Vec<Vec<f64>>]>,
) -> Result<f64> {
    let (online_hl, online_ll) = state.stack.defaults();
    let eval = eval_continuous_segment(
        &state.stack,
        &state.value_spec,
        &state.value_params,
        &online_hl,
        &online_ll,
        rollout,
        &noises.eps[0],
        &noises.xi[0],
        frozen_z.map(|f| f[0].as_slice()),
        false,
    )?;
    let reg_no_entropy = RegularizerConfig { alpha_h: 0.0, ..cfg.reg };
    Ok(policy_loss_of(&eval, &reg_no_entropy))
}

/// Analytic θ-gradient of the on-policy policy objective.
pub fn onpolicy_policy_gradients(
    state: &LearnerState,
    rollout: &ReplaySegment,
    cfg: &LearnerConfig,
    noises: &Svg0Noises,
) -> Result<(ParamVector, ParamVector)> {
    let (online_hl, online_ll) = state.stack.defaults();
    let mut bank = GradBank::new(state);
    let eval = eval_continuous_segment(
        &state.stack,
        &state.value_spec,
        &state.value_params,
        &online_hl,
        &online_ll,
        rollout,
        &noises.eps[0],
        &noises.xi[0],
        None,
        false,
    )?;
    let reg_no_entropy = RegularizerConfig { alpha_h: 0.0, ..cfg.reg };
    accumulate_policy_grads(
        &state.stack,
        &state.value_spec,
        &state.value_params,
        &online_hl,
        &eval,
        &noises.eps[0],
        &reg_no_entropy,
        1.0,
        &mut bank,
    )?;
    Ok((bank.hl, bank.ll))
}

// ---------------------------------------------------------------------------
// Discrete V-trace actor-critic with infrequent latents
// ---------------------------------------------------------------------------

/// Noise draws for one discrete update: one latent draw per resample slot.
#[derive(Debug, Clone)]
pub struct DiscreteNoises {
    pub eps: Vec<Vec<Vec<f64>>>,
}

pub fn discrete_draw_noises<R: Rng>(
    batch: &[ReplaySegment],
    latent_dim: usize,
    rng: &mut R,
) -> DiscreteNoises {
    DiscreteNoises {
        eps: batch
            .iter()
            .map(|seg| {
                (0..=seg.valid_len).map(|_| NoiseDraw::standard(latent_dim, rng).0).collect()
            })
            .collect(),
    }
}

/// One V-trace actor-critic update from (quasi) on-policy segments.
///
/// Latents are sampled fresh at schedule steps and held in between; the
/// gated KL enters the V-trace targets as a negative reward and is also
/// descended analytically with respect to both θ and φ. No separate target
/// parameters are kept. Segments must start on a latent resample step.
pub fn discrete_vtrace_update(
    state: &mut LearnerState,
    batch: &[ReplaySegment],
    cfg: &LearnerConfig,
    rng: &mut crate::SeedRng,
) -> Result<Diagnostics> {
    cfg.validate()?;
    if !matches!(state.stack.action_space, ActionSpace::Discrete { .. }) {
        return Err(Error::config("the V-trace learner requires discrete actions"));
    }
    if batch.is_empty() {
        return Err(Error::usage("empty batch"));
    }
    let noises = discrete_draw_noises(batch, state.stack.latent_dim, rng);
    discrete_vtrace_update_with_noises(state, batch, cfg, &noises)
}

struct DiscSlot {
    /// Present only at resample steps.
    hl: Option<GaussEval>,
    /// Index of the slot whose latent this step uses.
    resample_slot: usize,
    z: Vec<f64>,
    ll: CatEval,
    v_trace: mlp::ForwardTrace,
    v: f64,
    kl_hl: f64,
    kl_ll: f64,
    gate: bool,
}

/// Deterministic core of [`discrete_vtrace_update`].
pub fn discrete_vtrace_update_with_noises(
    state: &mut LearnerState,
    batch: &[ReplaySegment],
    cfg: &LearnerConfig,
    noises: &DiscreteNoises,
) -> Result<Diagnostics> {
    let p = cfg.reg.latent_period;
    let scale = 1.0 / batch.len() as f64;
    let mut bank = GradBank::new(state);
    let mut diag = Diagnostics::default();
    let mut step_count = 0usize;
    let (online_prior, online_dll) = state.stack.defaults();

    for (b, seg) in batch.iter().enumerate() {
        seg.validate()?;
        if !latent_schedule(seg.start_step, p) {
            return Err(Error::config(
                "discrete segments must start on a latent resample step",
            ));
        }
        let n = seg.valid_len;
        step_count += n;
        let slots_total = if seg.terminal { n } else { n + 1 };

        // Forward pass over the segment with latent persistence.
        let mut slots: Vec<DiscSlot> = Vec::with_capacity(slots_total);
        let mut z_prev = vec![0.0; state.stack.latent_dim];
        let mut log_pi = Vec::with_capacity(n);
        for i in 0..slots_total {
            let t = seg.start_step + i;
            let obs = if i < n { &seg.obs[i] } else { &seg.bootstrap_obs };
            let resample = latent_schedule(t, p);
            let (hl, z, resample_slot, kl_hl) = if resample || i == 0 {
                let hl = hl_eval(&state.stack, obs)?;
                let z = sample_reparam(&hl.dist, &NoiseDraw(noises.eps[b][i].clone()))?;
                if i > 0 {
                    z_prev = slots[i - 1].z.clone();
                }
                let prior = default_hl_step(
                    &online_prior,
                    &z_prev,
                    state.stack.latent_dim,
                    state.stack.hl_mean_bound,
                )?;
                let kl = kl_diag_gaussian(&hl.dist, &prior)?;
                (Some(hl), z, i, kl)
            } else {
                let prev = &slots[i - 1];
                (None, prev.z.clone(), prev.resample_slot, 0.0)
            };
            let mut ll_input = state.stack.asymmetry.view(Consumer::Ll, obs);
            ll_input.extend_from_slice(&z);
            let ll = cat_eval(&state.stack.ll_spec, &state.stack.ll_params, &ll_input)?;
            let kl_ll = match &online_dll {
                DefaultLl::Shared => 0.0,
                DefaultLl::Separate { spec, params } => {
                    let mut input = state.stack.asymmetry.view(Consumer::DefaultLl, obs);
                    input.extend_from_slice(&z);
                    kl_categorical(&ll.dist, &cat_eval(spec, params, &input)?.dist)?
                }
            };
            let v_input = critic_input(&state.stack, obs, &z, None);
            let v_trace = mlp::forward_traced(&state.value_spec, &state.value_params, &v_input)?;
            let v = v_trace.output()[0];
            if i < n {
                let a = match &seg.actions[i] {
                    ActionRecord::Discrete(a) => *a,
                    ActionRecord::Continuous(_) => {
                        return Err(Error::usage("discrete learner got a continuous action"))
                    }
                };
                log_pi.push(ll.dist.log_prob(a)?);
            }
            slots.push(DiscSlot { hl, resample_slot, z, ll, v_trace, v, kl_hl, kl_ll, gate: resample });
        }

        // V-trace targets with the α-scaled gated KL as a negative reward.
        let kl_p = |s: &DiscSlot| cfg.reg.alpha * (s.kl_hl + s.kl_ll);
        let mut values: Vec<f64> = slots[..n].iter().map(|s| s.v).collect();
        values.push(if seg.terminal { 0.0 } else { slots[n].v });
        let kl_p_next: Vec<f64> = (0..n)
            .map(|i| if i + 1 < n { kl_p(&slots[i + 1]) } else if seg.terminal { 0.0 } else { kl_p(&slots[n]) })
            .collect();
        let (vs, rho) = vtrace_targets(
            &seg.rewards[..n],
            &values,
            &kl_p_next,
            cfg.reg.gamma,
            &cfg.trace,
            &log_pi,
            &seg.behavior_log_probs[..n],
        )?;

        // Per-resample-slot latent cotangents from the policy gradient.
        let mut d_z: Vec<Vec<f64>> = vec![vec![0.0; state.stack.latent_dim]; slots_total];
        for i in 0..n {
            let a = match &seg.actions[i] {
                ActionRecord::Discrete(a) => *a,
                _ => unreachable!(),
            };
            let v_next = if i + 1 < n {
                vs[i + 1]
            } else if seg.terminal {
                0.0
            } else {
                values[n]
            };
            let delta = seg.rewards[i] + cfg.reg.gamma * (v_next - kl_p_next[i]) - slots[i].v;
            let coeff = rho[i] * delta * scale;
            diag.policy_loss += coeff * log_pi[i];

            // Live path: ρ δ ∇ log π(a|z,x), flowing through the latent.
            let pg: Vec<f64> = log_prob_categorical_grad(&slots[i].ll.dist, a)
                .into_iter()
                .map(|g| g * coeff)
                .collect();
            let d_in = cat_backward_accumulate(
                &state.stack.ll_spec,
                &state.stack.ll_params,
                &slots[i].ll,
                &pg,
                &mut bank.ll,
            )?;
            let z_off = d_in.len() - state.stack.latent_dim;
            let target = slots[i].resample_slot;
            for (dz, v) in d_z[target].iter_mut().zip(&d_in[z_off..]) {
                *dz += v;
            }

            // Stopped path: entropy bonus and the analytic action KL.
            let mut d_reg: Vec<f64> = entropy_categorical_grad(&slots[i].ll.dist)
                .into_iter()
                .map(|g| g * cfg.reg.alpha_h * scale)
                .collect();
            diag.entropy += slots[i].ll.dist.entropy();
            if let DefaultLl::Separate { spec, params } = &online_dll {
                let mut input = state.stack.asymmetry.view(Consumer::DefaultLl, &seg.obs[i]);
                input.extend_from_slice(&slots[i].z);
                let d0 = cat_eval(spec, params, &input)?;
                let gp = kl_categorical_grad_p(&slots[i].ll.dist, &d0.dist)?;
                for (slot, g) in d_reg.iter_mut().zip(&gp) {
                    *slot -= cfg.reg.alpha * scale * g;
                }
                // Distillation side: descend the same KL with respect to φ.
                let gq: Vec<f64> = kl_categorical_grad_q(&slots[i].ll.dist, &d0.dist)?
                    .into_iter()
                    .map(|g| g * cfg.reg.alpha * scale)
                    .collect();
                cat_backward_accumulate(
                    spec,
                    params,
                    &d0,
                    &gq,
                    bank.dll.as_mut().expect("default-ll grads allocated"),
                )?;
                diag.distill_loss += scale * slots[i].kl_ll;
            }
            cat_backward_accumulate(
                &state.stack.ll_spec,
                &state.stack.ll_params,
                &slots[i].ll,
                &d_reg,
                &mut bank.ll,
            )?;

            // Value loss (descent on ψ): the latent input is stopped.
            let err = slots[i].v - vs[i];
            diag.value_loss += scale * err * err;
            mlp::backward_accumulate(
                &state.value_spec,
                &state.value_params,
                &slots[i].v_trace,
                &[2.0 * err * scale],
                &mut bank.value,
            )?;
        }

        // High-level gradients at resample slots: the latent path from the
        // policy gradient plus the analytic gated KL on both θ and φ.
        let mut z_prev = vec![0.0; state.stack.latent_dim];
        for i in 0..slots_total {
            if !(slots[i].gate || i == 0) {
                continue;
            }
            let hl = slots[i].hl.as_ref().expect("resample slots carry the hl eval");
            let in_horizon = i < n;
            let prior_input = z_prev.clone();
            let prior = default_hl_step(
                &online_prior,
                &prior_input,
                state.stack.latent_dim,
                state.stack.hl_mean_bound,
            )?;
            let (d_mu_p, d_sd_p, d_mu_q, d_sd_q) = kl_diag_gaussian_grads(&hl.dist, &prior)?;
            let mut d_mu = d_z[i].clone();
            let mut d_sd: Vec<f64> = d_z[i]
                .iter()
                .zip(&noises.eps[b][i])
                .map(|(dz, e)| dz * e)
                .collect();
            if in_horizon {
                diag.kl_hl += slots[i].kl_hl;
                for k in 0..state.stack.latent_dim {
                    d_mu[k] -= cfg.reg.alpha * scale * d_mu_p[k];
                    d_sd[k] -= cfg.reg.alpha * scale * d_sd_p[k];
                }
                if let PriorKind::ArLearned { spec, params } = &online_prior {
                    let prior_eval =
                        gauss_eval_bounded(spec, params, &prior_input, state.stack.hl_mean_bound)?;
                    let gm: Vec<f64> = d_mu_q.iter().map(|g| g * cfg.reg.alpha * scale).collect();
                    let gs: Vec<f64> = d_sd_q.iter().map(|g| g * cfg.reg.alpha * scale).collect();
                    gauss_backward_accumulate(
                        spec,
                        params,
                        &prior_eval,
                        &gm,
                        &gs,
                        bank.prior.as_mut().expect("prior grads allocated"),
                    )?;
                    diag.distill_loss += scale * slots[i].kl_hl;
                }
            }
            gauss_backward_accumulate(
                &state.stack.hl_spec,
                &state.stack.hl_params,
                hl,
                &d_mu,
                &d_sd,
                &mut bank.hl,
            )?;
            z_prev = slots[i].z.clone();
        }

        for s in &slots[..n] {
            diag.kl_ll += s.kl_ll;
        }
        diag.mean_reward += seg.rewards[..n].iter().sum::<f64>();
    }

    let denom = step_count.max(1) as f64;
    diag.mean_reward /= denom;
    diag.kl_hl /= denom;
    diag.kl_ll /= denom;
    diag.entropy /= denom;

    if !(diag.policy_loss.is_finite() && diag.value_loss.is_finite() && bank.all_finite()) {
        diag.skipped = true;
        return Ok(diag);
    }
    apply_updates(state, &bank, &cfg.frozen)?;
    state.updates += 1;
    Ok(diag)
}

// ---------------------------------------------------------------------------
// Distillation
// ---------------------------------------------------------------------------

/// Standalone distillation update: descends `Σ KL̂ᴰ` with respect to the
/// default-policy parameters only. A no-op for fixed priors with shared
/// low levels.
pub fn distill_update(
    state: &mut LearnerState,
    batch: &[ReplaySegment],
    cfg: &LearnerConfig,
    rng: &mut crate::SeedRng,
) -> Result<Diagnostics> {
    cfg.validate()?;
    let action_dim = continuous_action_dim(&state.stack)?;
    let noises = svg0_draw_noises(batch, state.stack.latent_dim, action_dim, 1, rng);
    let scale = 1.0 / batch.len() as f64;
    let mut bank = GradBank::new(state);
    let mut diag = Diagnostics::default();
    for (b, seg) in batch.iter().enumerate() {
        let (online_hl, online_ll) = state.stack.defaults();
        let eval = eval_continuous_segment(
            &state.stack,
            &state.value_spec,
            &state.value_params,
            &online_hl,
            &online_ll,
            seg,
            &noises.eps[b],
            &noises.xi[b],
            None,
            false,
        )?;
        accumulate_distill_grads(&state.stack, &eval, scale, &mut bank, &mut diag.distill_loss)?;
    }
    if !bank.all_finite() || !diag.distill_loss.is_finite() {
        diag.skipped = true;
        return Ok(diag);
    }
    apply_default_updates(state, &bank, &cfg.frozen)?;
    Ok(diag)
}

/// Steps only the default-policy parameter groups (φ).
fn apply_default_updates(state: &mut LearnerState, bank: &GradBank, frozen: &FrozenSet) -> Result<()> {
    if !frozen.default_hl {
        if let (Some(opt), Some(grads), PriorKind::ArLearned { params, .. }) =
            (state.opt_prior.as_mut(), bank.prior.as_ref(), &mut state.stack.default_hl)
        {
            adam_step(opt, params, grads, Direction::Descent)?;
        }
    }
    if !frozen.default_ll {
        if let (Some(opt), Some(grads), DefaultLl::Separate { params, .. }) =
            (state.opt_dll.as_mut(), bank.dll.as_ref(), &mut state.stack.default_ll)
        {
            adam_step(opt, params, grads, Direction::Descent)?;
        }
    }
    Ok(())
}

/// One descent step of `Σ KL(agent ‖ prior(z_prev))` on the learned prior
/// from explicit (agent distribution, previous latent) pairs, with an
/// unbounded prior mean head. Returns the loss before the step. Fixed
/// priors are left untouched.
pub fn distill_pairs_update(
    prior: &mut PriorKind,
    opt: &mut AdamState,
    pairs: &[(DiagGaussian, Vec<f64>)],
) -> Result<f64> {
    let scale = 1.0 / pairs.len().max(1) as f64;
    let mut loss = 0.0;
    match prior {
        PriorKind::IsoGaussian | PriorKind::Ar1 { .. } => {
            for (agent, z_prev) in pairs {
                let d = default_hl_step(prior, z_prev, agent.dim(), None)?;
                loss += scale * kl_diag_gaussian(agent, &d)?;
            }
            Ok(loss)
        }
        PriorKind::ArLearned { spec, params } => {
            let mut grads = ParamVector::zeros(spec);
            for (agent, z_prev) in pairs {
                let eval = gauss_eval(spec, params, z_prev)?;
                loss += scale * kl_diag_gaussian(agent, &eval.dist)?;
                let (_, _, d_mu_q, d_sd_q) = kl_diag_gaussian_grads(agent, &eval.dist)?;
                let gm: Vec<f64> = d_mu_q.iter().map(|g| g * scale).collect();
                let gs: Vec<f64> = d_sd_q.iter().map(|g| g * scale).collect();
                gauss_backward_accumulate(spec, params, &eval, &gm, &gs, &mut grads)?;
            }
            adam_step(opt, params, &grads, Direction::Descent)?;
            Ok(loss)
        }
    }
}
