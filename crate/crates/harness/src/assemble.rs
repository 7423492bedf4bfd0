//! Builds environments, policy stacks, and learner states from a resolved
//! configuration, including the transfer wirings that freeze and reuse
//! pretrained components.

use anyhow::{anyhow, bail, Result};
use rand::SeedableRng;

use klrl_core::env::{Environment, GridEnv, PointMassEnv};
use klrl_core::learner::{build_value_spec, FrozenSet, LearnerConfig, LearnerState};
use klrl_core::mlp::{Activation, HeadSpec, MlpSpec, ParamVector};
use klrl_core::objective::RegularizerConfig;
use klrl_core::offpolicy::TraceConfig;
use klrl_core::policy::{
    categorical_net_spec, gaussian_net_spec, init_stddev_bias, ActionSpace, AsymmetryMask,
    Consumer, DefaultLl, GroupDims, PolicyStack, PriorKind,
};
use klrl_core::SeedRng;

use crate::checkpoint::Checkpoint;
use crate::config::{
    EnvKind, ExperimentConfig, LearnerKind, PriorChoice, TransferModeChoice,
};

pub fn make_env(cfg: &ExperimentConfig) -> Box<dyn Environment + Send> {
    match cfg.env {
        EnvKind::Grid => Box::new(GridEnv::new(cfg.grid_config())),
        _ => Box::new(PointMassEnv::new(cfg.pm_config())),
    }
}

pub fn env_group_dims(cfg: &ExperimentConfig) -> GroupDims {
    match cfg.env {
        EnvKind::Grid => GridEnv::group_dims_for(&cfg.grid_config()),
        _ => klrl_core::env::pm_group_dims(&cfg.pm_config()),
    }
}

pub fn env_action_space(cfg: &ExperimentConfig) -> ActionSpace {
    match cfg.env {
        EnvKind::Grid => ActionSpace::Discrete { n: 4 },
        _ => ActionSpace::Continuous { dim: 2 },
    }
}

fn flat_hl_spec(input_dim: usize) -> Result<MlpSpec> {
    MlpSpec::with_heads(
        vec![input_dim, 0],
        Activation::Elu,
        vec![
            HeadSpec { name: "mean".into(), len: 0 },
            HeadSpec { name: "log_stddev".into(), len: 0 },
        ],
    )
    .map_err(|e| anyhow!("{e}"))
}

/// Builds a freshly initialized stack for the configured environment.
pub fn build_stack(cfg: &ExperimentConfig, rng: &mut SeedRng) -> Result<PolicyStack> {
    let dims = env_group_dims(cfg);
    let action_space = env_action_space(cfg);
    let mask = AsymmetryMask::new(
        cfg.hl_view.clone(),
        cfg.ll_view.clone(),
        cfg.default_hl_view.clone(),
        cfg.default_ll_view.clone(),
    )
    .map_err(|e| anyhow!("{e}"))?;

    let hl_in = mask.view_dim(Consumer::Hl, &dims);
    let (hl_spec, hl_params) = if cfg.latent_dim == 0 {
        let spec = flat_hl_spec(hl_in)?;
        let params = ParamVector::zeros(&spec);
        (spec, params)
    } else {
        let spec = gaussian_net_spec(hl_in, &cfg.hl_hidden, cfg.latent_dim, Activation::Elu)
            .map_err(|e| anyhow!("{e}"))?;
        let mut params = ParamVector::init(&spec, rng);
        init_stddev_bias(&spec, &mut params, cfg.init_hl_stddev).map_err(|e| anyhow!("{e}"))?;
        (spec, params)
    };

    let ll_in = mask.view_dim(Consumer::Ll, &dims) + cfg.latent_dim;
    let (ll_spec, ll_params) = match action_space {
        ActionSpace::Continuous { dim } => {
            let spec = gaussian_net_spec(ll_in, &cfg.ll_hidden, dim, Activation::Elu)
                .map_err(|e| anyhow!("{e}"))?;
            let mut params = ParamVector::init(&spec, rng);
            init_stddev_bias(&spec, &mut params, cfg.init_ll_stddev)
                .map_err(|e| anyhow!("{e}"))?;
            apply_action_mean_bias(&spec, &mut params, &cfg.init_action_mean)?;
            (spec, params)
        }
        ActionSpace::Discrete { n } => {
            let spec = categorical_net_spec(ll_in, &cfg.ll_hidden, n, Activation::Elu)
                .map_err(|e| anyhow!("{e}"))?;
            let params = ParamVector::init(&spec, rng);
            (spec, params)
        }
    };

    let default_hl = match cfg.prior {
        PriorChoice::Iso => PriorKind::IsoGaussian,
        PriorChoice::Ar1 => PriorKind::Ar1 { alpha: cfg.prior_ar_alpha },
        PriorChoice::Learned => {
            let spec = gaussian_net_spec(
                cfg.latent_dim,
                &cfg.prior_hidden,
                cfg.latent_dim,
                Activation::Elu,
            )
            .map_err(|e| anyhow!("{e}"))?;
            let mut params = ParamVector::init(&spec, rng);
            init_stddev_bias(&spec, &mut params, 1.0).map_err(|e| anyhow!("{e}"))?;
            PriorKind::ArLearned { spec, params }
        }
    };

    let default_ll = if cfg.shared_ll {
        DefaultLl::Shared
    } else {
        let dll_in = mask.view_dim(Consumer::DefaultLl, &dims) + cfg.latent_dim;
        match action_space {
            ActionSpace::Continuous { dim } => {
                let spec = gaussian_net_spec(dll_in, &cfg.ll_hidden, dim, Activation::Elu)
                    .map_err(|e| anyhow!("{e}"))?;
                let mut params = ParamVector::init(&spec, rng);
                init_stddev_bias(&spec, &mut params, cfg.init_ll_stddev)
                    .map_err(|e| anyhow!("{e}"))?;
                apply_action_mean_bias(&spec, &mut params, &cfg.init_action_mean)?;
                DefaultLl::Separate { spec, params }
            }
            ActionSpace::Discrete { n } => {
                let spec = categorical_net_spec(dll_in, &cfg.ll_hidden, n, Activation::Elu)
                    .map_err(|e| anyhow!("{e}"))?;
                let params = ParamVector::init(&spec, rng);
                DefaultLl::Separate { spec, params }
            }
        }
    };

    let stack = PolicyStack {
        hl_spec,
        hl_params,
        ll_spec,
        ll_params,
        default_hl,
        default_ll,
        latent_dim: cfg.latent_dim,
        latent_period: cfg.latent_period,
        asymmetry: mask,
        action_space,
        group_dims: dims,
        hl_mean_bound: cfg.hl_mean_bound(),
        ll_mean_bound: match action_space {
            ActionSpace::Continuous { .. } => cfg.ll_mean_bound(),
            ActionSpace::Discrete { .. } => None,
        },
    };
    stack.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(stack)
}

/// Sets the mean-head bias of a continuous policy net (exploration prior).
fn apply_action_mean_bias(
    spec: &MlpSpec,
    params: &mut ParamVector,
    bias: &[f64],
) -> Result<()> {
    if bias.is_empty() {
        return Ok(());
    }
    let mean = spec.head_range("mean").map_err(|e| anyhow!("{e}"))?;
    if bias.len() != mean.len() {
        bail!("init_action_mean has {} dims, action space has {}", bias.len(), mean.len());
    }
    let last = spec.num_layers() - 1;
    let b = params.slice_mut(&format!("layer{last}.b")).map_err(|e| anyhow!("{e}"))?;
    for (slot, v) in b[mean].iter_mut().zip(bias) {
        *slot = *v;
    }
    Ok(())
}

pub fn learner_config(cfg: &ExperimentConfig, frozen: FrozenSet) -> LearnerConfig {
    LearnerConfig {
        beta_pi: cfg.beta_pi,
        beta_q: cfg.beta_q,
        beta_pi0: cfg.beta_pi0,
        reg: RegularizerConfig {
            alpha: cfg.alpha,
            alpha_h: cfg.alpha_h,
            gamma: cfg.gamma,
            latent_period: cfg.latent_period,
        },
        batch_size: cfg.batch_size,
        unroll_len: cfg.unroll_len,
        target_period: cfg.target_period,
        trace: TraceConfig { lambda: cfg.lambda, c_bar: cfg.c_bar, rho_bar: cfg.rho_bar },
        q_samples: cfg.q_samples,
        frozen,
    }
}

/// Fresh learner state for a from-scratch run.
pub fn build_learner(cfg: &ExperimentConfig, rng: &mut SeedRng) -> Result<LearnerState> {
    let stack = build_stack(cfg, rng)?;
    let value_spec = build_value_spec(&stack, &cfg.value_hidden).map_err(|e| anyhow!("{e}"))?;
    let value_params = ParamVector::init(&value_spec, rng);
    LearnerState::new(stack, value_spec, value_params, &learner_config(cfg, FrozenSet::default()))
        .map_err(|e| anyhow!("{e}"))
}

/// Learner state for a transfer run: loads the pretrained checkpoint,
/// reuses and freezes components per mode, and re-initializes the rest.
pub fn build_transfer_learner(
    cfg: &ExperimentConfig,
    rng: &mut SeedRng,
) -> Result<(LearnerState, FrozenSet)> {
    let path = cfg
        .transfer_checkpoint
        .as_ref()
        .ok_or_else(|| anyhow!("transfer runs need transfer.checkpoint"))?;
    let mode = cfg.transfer_mode.ok_or_else(|| anyhow!("transfer runs need transfer.mode"))?;
    let ckpt = Checkpoint::load(path)?;
    let pre = &ckpt.stack;
    if pre.latent_dim != cfg.latent_dim {
        bail!(
            "checkpoint latent dim {} does not match configured {}",
            pre.latent_dim,
            cfg.latent_dim
        );
    }

    // Fresh stack for the new task/body; pretrained pieces are spliced in.
    let mut stack = build_stack(cfg, rng)?;
    let frozen;
    match mode {
        TransferModeChoice::TaskSharedLl => {
            // Freeze the defaults; the agent low level *is* the pretrained
            // default low level; only a new high level learns.
            let (dll_spec, dll_params) = pretrained_default_ll(pre);
            if dll_spec.input_dim() != stack.ll_spec.input_dim() {
                bail!(
                    "pretrained low-level default expects {} inputs, new task provides {}",
                    dll_spec.input_dim(),
                    stack.ll_spec.input_dim()
                );
            }
            stack.ll_spec = dll_spec;
            stack.ll_params = dll_params;
            stack.default_ll = DefaultLl::Shared;
            stack.default_hl = pre.default_hl.clone();
            frozen = FrozenSet { hl: false, ll: true, default_hl: true, default_ll: true };
        }
        TransferModeChoice::TaskSeparateLl => {
            // Freeze the defaults; initialize the free low level from the
            // pretrained default low level, bit-exactly.
            let (dll_spec, dll_params) = pretrained_default_ll(pre);
            if dll_spec.input_dim() != stack.ll_spec.input_dim() {
                bail!(
                    "pretrained low-level default expects {} inputs, new task provides {}",
                    dll_spec.input_dim(),
                    stack.ll_spec.input_dim()
                );
            }
            stack.ll_spec = dll_spec.clone();
            stack.ll_params = dll_params.clone();
            stack.default_ll = DefaultLl::Separate { spec: dll_spec, params: dll_params };
            stack.default_hl = pre.default_hl.clone();
            frozen = FrozenSet { hl: false, ll: false, default_hl: true, default_ll: true };
        }
        TransferModeChoice::Body => {
            // Freeze the body-agnostic high level and its default; a new
            // body-specific low level learns under the latent-space KL.
            if pre.hl_spec.input_dim() != stack.hl_spec.input_dim() {
                bail!(
                    "pretrained high level expects {} inputs, new body provides {}",
                    pre.hl_spec.input_dim(),
                    stack.hl_spec.input_dim()
                );
            }
            stack.hl_spec = pre.hl_spec.clone();
            stack.hl_params = pre.hl_params.clone();
            stack.default_hl = pre.default_hl.clone();
            stack.default_ll = DefaultLl::Shared;
            frozen = FrozenSet { hl: true, ll: false, default_hl: true, default_ll: true };
        }
    }
    stack.validate().map_err(|e| anyhow!("{e}"))?;
    let value_spec = build_value_spec(&stack, &cfg.value_hidden).map_err(|e| anyhow!("{e}"))?;
    let value_params = ParamVector::init(&value_spec, rng);
    let state =
        LearnerState::new(stack, value_spec, value_params, &learner_config(cfg, frozen))
            .map_err(|e| anyhow!("{e}"))?;
    Ok((state, frozen))
}

/// The pretrained low-level default parameters: the separate default when
/// one exists, otherwise the shared low level itself.
fn pretrained_default_ll(pre: &PolicyStack) -> (MlpSpec, ParamVector) {
    match &pre.default_ll {
        DefaultLl::Separate { spec, params } => (spec.clone(), params.clone()),
        DefaultLl::Shared => (pre.ll_spec.clone(), pre.ll_params.clone()),
    }
}

pub fn learner_kind_tag(kind: LearnerKind) -> &'static str {
    match kind {
        LearnerKind::Svg0 => "svg0",
        LearnerKind::DiscreteVtrace => "vtrace",
        LearnerKind::OnPolicy => "onpolicy",
    }
}

/// Deterministic per-role RNG derivation from the run seed.
pub fn derive_rng(seed: u64, role: &str, index: u64) -> SeedRng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in role.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^= seed.wrapping_mul(0x9e3779b97f4a7c15);
    h ^= index.wrapping_add(0x517cc1b727220a95).rotate_left(17);
    SeedRng::seed_from_u64(h)
}
