//! Dense-reward convergence probes for the continuous learner: these catch
//! signal-path defects that the gradient oracles cannot (they only check
//! consistency between the loss and its gradient).

use rand::SeedableRng;

use klrl_core::dist::{sample_reparam, NoiseDraw};
use klrl_core::learner::*;
use klrl_core::mlp::{Activation, HeadSpec, MlpSpec, ParamVector};
use klrl_core::objective::RegularizerConfig;
use klrl_core::offpolicy::{ReplaySegment, TraceConfig};
use klrl_core::policy::{
    gaussian_net_spec, init_stddev_bias, ll_step, ActionDist, ActionRecord, ActionSpace,
    AsymmetryMask, DefaultLl, GroupDims, ObsGroup, ObservationBundle, PolicyStack, PriorKind,
};
use klrl_core::SeedRng;

fn flat_cont_stack(seed: u64) -> PolicyStack {
    let mut rng = SeedRng::seed_from_u64(seed);
    let hl_spec = MlpSpec::with_heads(
        vec![1, 0],
        Activation::Elu,
        vec![
            HeadSpec { name: "mean".into(), len: 0 },
            HeadSpec { name: "log_stddev".into(), len: 0 },
        ],
    )
    .unwrap();
    let ll_spec = gaussian_net_spec(1, &[], 1, Activation::Identity).unwrap();
    let mut ll_params = ParamVector::init(&ll_spec, &mut rng);
    init_stddev_bias(&ll_spec, &mut ll_params, 0.6).unwrap();
    PolicyStack {
        hl_params: ParamVector::zeros(&hl_spec),
        hl_spec,
        ll_spec,
        ll_params,
        default_hl: PriorKind::IsoGaussian,
        default_ll: DefaultLl::Shared,
        latent_dim: 0,
        latent_period: 1,
        asymmetry: AsymmetryMask::new(
            vec![ObsGroup::Proprio],
            vec![ObsGroup::Proprio],
            vec![],
            vec![ObsGroup::Proprio],
        )
        .unwrap(),
        action_space: ActionSpace::Continuous { dim: 1 },
        group_dims: GroupDims { proprio: 1, task: 0, internal: 0, global: 0 },
        hl_mean_bound: None,
        ll_mean_bound: None,
    }
}

fn obs() -> ObservationBundle {
    ObservationBundle { proprio: vec![1.0], task: vec![], internal: vec![], global: vec![] }
}

fn policy_mean(stack: &PolicyStack) -> f64 {
    match ll_step(stack, &[], &obs()).unwrap() {
        ActionDist::Gaussian(d) => d.mean()[0],
        _ => unreachable!(),
    }
}

/// One-step dense reward r = a: the policy mean must climb.
#[test]
fn svg0_climbs_a_linear_reward() {
    let cfg = LearnerConfig {
        beta_pi: 3e-3,
        beta_q: 1e-2,
        beta_pi0: 1e-3,
        reg: RegularizerConfig { alpha: 0.0, alpha_h: 0.0, gamma: 0.9, latent_period: 1 },
        batch_size: 16,
        unroll_len: 1,
        target_period: 50,
        trace: TraceConfig::default(),
        q_samples: 1,
        frozen: FrozenSet::default(),
    };
    let stack = flat_cont_stack(1);
    let value_spec = build_value_spec(&stack, &[16]).unwrap();
    let mut rng = SeedRng::seed_from_u64(2);
    let value_params = ParamVector::init(&value_spec, &mut rng);
    let mut state = LearnerState::new(stack, value_spec, value_params, &cfg).unwrap();

    let start_mean = policy_mean(&state.stack);
    for _ in 0..1500 {
        let mut batch = Vec::new();
        for _ in 0..cfg.batch_size {
            let dist = match ll_step(&state.stack, &[], &obs()).unwrap() {
                ActionDist::Gaussian(d) => d,
                _ => unreachable!(),
            };
            let a = sample_reparam(&dist, &NoiseDraw::standard(1, &mut rng)).unwrap();
            let lp = dist.log_prob(&a).unwrap();
            batch.push(ReplaySegment {
                obs: vec![obs()],
                actions: vec![ActionRecord::Continuous(a.clone())],
                rewards: vec![a[0]],
                behavior_log_probs: vec![lp],
                bootstrap_obs: obs(),
                start_step: 1,
                valid_len: 1,
                terminal: true,
                latents: None,
            });
        }
        svg0_update(&mut state, &batch, &cfg, &mut rng).unwrap();
    }
    let end_mean = policy_mean(&state.stack);
    assert!(
        end_mean > start_mean + 1.0,
        "policy mean must climb the linear reward: {start_mean} -> {end_mean}"
    );
}

/// Two-step credit assignment: reward arrives at the second step and equals
/// the first action. The bootstrap chain must carry it back.
#[test]
fn svg0_propagates_delayed_reward() {
    let cfg = LearnerConfig {
        beta_pi: 3e-3,
        beta_q: 1e-2,
        beta_pi0: 1e-3,
        reg: RegularizerConfig { alpha: 0.0, alpha_h: 0.0, gamma: 0.9, latent_period: 1 },
        batch_size: 16,
        unroll_len: 2,
        target_period: 50,
        trace: TraceConfig::default(),
        q_samples: 1,
        frozen: FrozenSet::default(),
    };
    // Observation carries the previous action so the critic can see it.
    let obs_at = |prev_a: f64| ObservationBundle {
        proprio: vec![prev_a],
        task: vec![],
        internal: vec![],
        global: vec![],
    };
    let stack = flat_cont_stack(3);
    let value_spec = build_value_spec(&stack, &[16]).unwrap();
    let mut rng = SeedRng::seed_from_u64(4);
    let value_params = ParamVector::init(&value_spec, &mut rng);
    let mut state = LearnerState::new(stack, value_spec, value_params, &cfg).unwrap();

    let start_mean = policy_mean(&state.stack);
    for _ in 0..2000 {
        let mut batch = Vec::new();
        for _ in 0..cfg.batch_size {
            let d0 = match ll_step(&state.stack, &[], &obs_at(0.0)).unwrap() {
                ActionDist::Gaussian(d) => d,
                _ => unreachable!(),
            };
            let a0 = sample_reparam(&d0, &NoiseDraw::standard(1, &mut rng)).unwrap();
            let o1 = obs_at(a0[0]);
            let d1 = match ll_step(&state.stack, &[], &o1).unwrap() {
                ActionDist::Gaussian(d) => d,
                _ => unreachable!(),
            };
            let a1 = sample_reparam(&d1, &NoiseDraw::standard(1, &mut rng)).unwrap();
            batch.push(ReplaySegment {
                obs: vec![obs_at(0.0), o1.clone()],
                actions: vec![
                    ActionRecord::Continuous(a0.clone()),
                    ActionRecord::Continuous(a1.clone()),
                ],
                rewards: vec![0.0, a0[0]],
                behavior_log_probs: vec![
                    d0.log_prob(&a0).unwrap(),
                    d1.log_prob(&a1).unwrap(),
                ],
                bootstrap_obs: o1,
                start_step: 1,
                valid_len: 2,
                terminal: true,
                latents: None,
            });
        }
        svg0_update(&mut state, &batch, &cfg, &mut rng).unwrap();
    }
    let end_mean = policy_mean(&state.stack);
    assert!(
        end_mean > start_mean + 0.5,
        "delayed reward must still push the first action up: {start_mean} -> {end_mean}"
    );
}
