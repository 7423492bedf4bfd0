//! Learner verification: finite-difference gradient oracles, the latent
//! stop-gradient contract, gradient isolation between parameter groups,
//! cross-learner agreement, and small convergence runs.

use rand::{Rng, SeedableRng};

use klrl_core::dist::DiagGaussian;
use klrl_core::learner::*;
use klrl_core::mlp::{AdamState, Activation, MlpSpec, ParamVector};
use klrl_core::objective::RegularizerConfig;
use klrl_core::offpolicy::{ReplaySegment, TraceConfig};
use klrl_core::oracle::max_rel_error_fd;
use klrl_core::policy::{
    categorical_net_spec, gaussian_net_spec, init_stddev_bias, ll_step, ActionDist, ActionRecord,
    ActionSpace, AsymmetryMask, DefaultLl, GroupDims, ObsGroup, ObservationBundle, PolicyStack,
    PriorKind,
};
use klrl_core::SeedRng;

fn cont_stack(seed: u64, prior: PriorKind, default_ll_separate: bool) -> PolicyStack {
    let mut rng = SeedRng::seed_from_u64(seed);
    let dims = GroupDims { proprio: 2, task: 2, internal: 0, global: 0 };
    let mask = AsymmetryMask::new(
        vec![ObsGroup::Proprio, ObsGroup::Task],
        vec![ObsGroup::Proprio],
        vec![],
        vec![ObsGroup::Proprio],
    )
    .unwrap();
    let latent_dim = 2;
    let action_dim = 1;
    let hl_spec = gaussian_net_spec(4, &[5], latent_dim, Activation::Elu).unwrap();
    let mut hl_params = ParamVector::init(&hl_spec, &mut rng);
    init_stddev_bias(&hl_spec, &mut hl_params, 0.8).unwrap();
    let ll_spec = gaussian_net_spec(2 + latent_dim, &[5], action_dim, Activation::Elu).unwrap();
    let mut ll_params = ParamVector::init(&ll_spec, &mut rng);
    init_stddev_bias(&ll_spec, &mut ll_params, 0.5).unwrap();
    let default_ll = if default_ll_separate {
        let spec = gaussian_net_spec(2 + latent_dim, &[5], action_dim, Activation::Elu).unwrap();
        let mut params = ParamVector::init(&spec, &mut rng);
        init_stddev_bias(&spec, &mut params, 0.5).unwrap();
        DefaultLl::Separate { spec, params }
    } else {
        DefaultLl::Shared
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
        action_space: ActionSpace::Continuous { dim: action_dim },
        group_dims: dims,
        hl_mean_bound: None,
        ll_mean_bound: None,
    };
    stack.validate().unwrap();
    stack
}

fn learner_cfg(alpha: f64, alpha_h: f64) -> LearnerConfig {
    LearnerConfig {
        beta_pi: 1e-3,
        beta_q: 1e-3,
        beta_pi0: 1e-3,
        reg: RegularizerConfig { alpha, alpha_h, gamma: 0.9, latent_period: 1 },
        batch_size: 1,
        unroll_len: 2,
        target_period: 100,
        trace: TraceConfig::default(),
        q_samples: 2,
        frozen: FrozenSet::default(),
    }
}

fn cont_state(seed: u64, prior: PriorKind, separate: bool, cfg: &LearnerConfig) -> LearnerState {
    let stack = cont_stack(seed, prior, separate);
    let value_spec = build_value_spec(&stack, &[6]).unwrap();
    let mut rng = SeedRng::seed_from_u64(seed.wrapping_add(1000));
    let value_params = ParamVector::init(&value_spec, &mut rng);
    LearnerState::new(stack, value_spec, value_params, cfg).unwrap()
}

fn rand_obs(rng: &mut SeedRng) -> ObservationBundle {
    ObservationBundle {
        proprio: (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        task: (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        internal: vec![],
        global: vec![],
    }
}

fn rand_cont_segment(rng: &mut SeedRng, k: usize, terminal: bool) -> ReplaySegment {
    ReplaySegment {
        obs: (0..k).map(|_| rand_obs(rng)).collect(),
        actions: (0..k)
            .map(|_| ActionRecord::Continuous(vec![rng.gen_range(-1.0..1.0)]))
            .collect(),
        rewards: (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        behavior_log_probs: (0..k).map(|_| rng.gen_range(-2.0..-0.1)).collect(),
        bootstrap_obs: rand_obs(rng),
        start_step: 1,
        valid_len: k,
        terminal,
        latents: None,
    }
}

#[test]
fn svg0_policy_gradient_matches_finite_differences() {
    let cfg = learner_cfg(0.3, 0.05);
    let state = cont_state(1, PriorKind::Ar1 { alpha: 0.6 }, true, &cfg);
    let mut rng = SeedRng::seed_from_u64(2);
    let batch = vec![rand_cont_segment(&mut rng, 3, false)];
    let noises = svg0_draw_noises(&batch, 2, 1, cfg.q_samples, &mut rng);
    let frozen = svg0_base_latents(&state, &batch, &noises).unwrap();
    let (g_hl, g_ll) = svg0_policy_gradients(&state, &batch, &cfg, &noises).unwrap();

    let hl_loss = |p: &ParamVector| {
        let mut s = state.clone();
        s.stack.hl_params = p.clone();
        svg0_policy_loss(&s, &batch, &cfg, &noises, Some(&frozen)).unwrap()
    };
    let err_hl = max_rel_error_fd(hl_loss, &state.stack.hl_params, g_hl.values(), 1e-5);
    assert!(err_hl < 1e-4, "hl gradient error {err_hl}");

    let ll_loss = |p: &ParamVector| {
        let mut s = state.clone();
        s.stack.ll_params = p.clone();
        svg0_policy_loss(&s, &batch, &cfg, &noises, Some(&frozen)).unwrap()
    };
    let err_ll = max_rel_error_fd(ll_loss, &state.stack.ll_params, g_ll.values(), 1e-5);
    assert!(err_ll < 1e-4, "ll gradient error {err_ll}");
}

#[test]
fn svg0_policy_gradient_matches_finite_differences_with_bounded_means() {
    let cfg = learner_cfg(0.2, 0.03);
    let mut state = cont_state(41, PriorKind::Ar1 { alpha: 0.5 }, true, &cfg);
    state.stack.hl_mean_bound = Some(3.0);
    state.stack.ll_mean_bound = Some(1.0);
    state.sync_targets();
    let mut rng = SeedRng::seed_from_u64(42);
    let batch = vec![rand_cont_segment(&mut rng, 2, false)];
    let noises = svg0_draw_noises(&batch, 2, 1, cfg.q_samples, &mut rng);
    let frozen = svg0_base_latents(&state, &batch, &noises).unwrap();
    let (g_hl, g_ll) = svg0_policy_gradients(&state, &batch, &cfg, &noises).unwrap();

    let hl_loss = |p: &ParamVector| {
        let mut s = state.clone();
        s.stack.hl_params = p.clone();
        svg0_policy_loss(&s, &batch, &cfg, &noises, Some(&frozen)).unwrap()
    };
    let err = max_rel_error_fd(hl_loss, &state.stack.hl_params, g_hl.values(), 1e-5);
    assert!(err < 1e-4, "bounded hl gradient error {err}");
    let ll_loss = |p: &ParamVector| {
        let mut s = state.clone();
        s.stack.ll_params = p.clone();
        svg0_policy_loss(&s, &batch, &cfg, &noises, Some(&frozen)).unwrap()
    };
    let err = max_rel_error_fd(ll_loss, &state.stack.ll_params, g_ll.values(), 1e-5);
    assert!(err < 1e-4, "bounded ll gradient error {err}");
}

#[test]
fn svg0_stops_gradients_through_the_latent() {
    // Differentiating through the latent (no frozen override) must disagree
    // with the shipped gradient, which holds the stopped slots fixed.
    let cfg = learner_cfg(0.5, 0.1);
    let state = cont_state(3, PriorKind::Ar1 { alpha: 0.7 }, true, &cfg);
    let mut rng = SeedRng::seed_from_u64(4);
    let batch = vec![rand_cont_segment(&mut rng, 3, false)];
    let noises = svg0_draw_noises(&batch, 2, 1, cfg.q_samples, &mut rng);
    let (g_hl, _) = svg0_policy_gradients(&state, &batch, &cfg, &noises).unwrap();

    let live_loss = |p: &ParamVector| {
        let mut s = state.clone();
        s.stack.hl_params = p.clone();
        svg0_policy_loss(&s, &batch, &cfg, &noises, None).unwrap()
    };
    // Central differences of the fully live loss: the "incorrect" gradient.
    let mut live_grad = vec![0.0; state.stack.hl_params.len()];
    let mut p = state.stack.hl_params.clone();
    let h = 1e-5;
    for i in 0..p.len() {
        let orig = p.values()[i];
        p.values_mut()[i] = orig + h;
        let up = live_loss(&p);
        p.values_mut()[i] = orig - h;
        let down = live_loss(&p);
        p.values_mut()[i] = orig;
        live_grad[i] = (up - down) / (2.0 * h);
    }
    let max_diff = g_hl
        .values()
        .iter()
        .zip(&live_grad)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    assert!(
        max_diff > 1e-6,
        "live differentiation must differ from the stop-gradient contract (diff {max_diff})"
    );
}

#[test]
fn policy_loss_is_isolated_from_default_and_value_parameters() {
    let cfg = learner_cfg(0.4, 0.02);
    let state = cont_state(5, PriorKind::ArLearned {
        spec: gaussian_net_spec(2, &[4], 2, Activation::Elu).unwrap(),
        params: {
            let spec = gaussian_net_spec(2, &[4], 2, Activation::Elu).unwrap();
            let mut rng = SeedRng::seed_from_u64(50);
            let mut p = ParamVector::init(&spec, &mut rng);
            init_stddev_bias(&spec, &mut p, 1.0).unwrap();
            p
        },
    }, true, &cfg);
    let mut rng = SeedRng::seed_from_u64(6);
    let batch = vec![rand_cont_segment(&mut rng, 2, false)];
    let noises = svg0_draw_noises(&batch, 2, 1, cfg.q_samples, &mut rng);
    let frozen = svg0_base_latents(&state, &batch, &noises).unwrap();
    let base = svg0_policy_loss(&state, &batch, &cfg, &noises, Some(&frozen)).unwrap();

    // Perturb the online prior (φ): the policy loss reads targets only.
    let mut s = state.clone();
    if let PriorKind::ArLearned { params, .. } = &mut s.stack.default_hl {
        for v in params.values_mut() {
            *v += 0.37;
        }
    }
    let moved = svg0_policy_loss(&s, &batch, &cfg, &noises, Some(&frozen)).unwrap();
    assert_eq!(base.to_bits(), moved.to_bits(), "∂L_pi/∂φ must vanish");

    // Perturb the online critic (ψ): the policy loss uses the target critic.
    let mut s = state.clone();
    for v in s.value_params.values_mut() {
        *v += 0.53;
    }
    let moved = svg0_policy_loss(&s, &batch, &cfg, &noises, Some(&frozen)).unwrap();
    assert_eq!(base.to_bits(), moved.to_bits(), "∂L_pi/∂ψ must vanish");
}

#[test]
fn matched_policies_give_zero_kl_and_zero_distill_gradient() {
    let cfg = learner_cfg(1.0, 0.0);
    let mut state = cont_state(7, PriorKind::IsoGaussian, true, &cfg);
    // Make the HL output exactly the iso prior.
    state.stack.hl_params.fill(0.0);
    init_stddev_bias(&state.stack.hl_spec, &mut state.stack.hl_params, 1.0).unwrap();
    // Make the separate default identical to the agent low level (the
    // masks already agree on the proprio-only view).
    if let DefaultLl::Separate { params, .. } = &mut state.stack.default_ll {
        let agent = state.stack.ll_params.clone();
        params.copy_from(&agent);
    }
    state.sync_targets();

    let default_before = match &state.stack.default_ll {
        DefaultLl::Separate { params, .. } => params.clone(),
        DefaultLl::Shared => unreachable!(),
    };
    let mut rng = SeedRng::seed_from_u64(8);
    let mut batch = Vec::new();
    for _ in 0..4 {
        let mut seg = rand_cont_segment(&mut rng, 2, false);
        for r in &mut seg.rewards {
            *r = 0.0;
        }
        batch.push(seg);
    }
    let diag = svg0_update(&mut state, &batch, &cfg, &mut rng).unwrap();
    assert!(diag.kl_hl.abs() < 1e-10, "kl_hl {}", diag.kl_hl);
    assert!(diag.kl_ll.abs() < 1e-10, "kl_ll {}", diag.kl_ll);
    let default_after = match &state.stack.default_ll {
        DefaultLl::Separate { params, .. } => params.clone(),
        DefaultLl::Shared => unreachable!(),
    };
    assert_eq!(default_before, default_after, "distillation gradient must be zero");
}

#[test]
fn q_expectation_estimates_agree_across_sample_counts() {
    // The M-sample estimator of E_pi Q is unbiased: means under M=1 and
    // M=16 agree within four pooled standard errors over 10^4 trials.
    let cfg1 = LearnerConfig { q_samples: 1, ..learner_cfg(0.0, 0.0) };
    let cfg16 = LearnerConfig { q_samples: 16, ..learner_cfg(0.0, 0.0) };
    let state = cont_state(9, PriorKind::IsoGaussian, false, &cfg1);
    let mut rng = SeedRng::seed_from_u64(10);
    let seg = rand_cont_segment(&mut rng, 1, true);
    let batch = vec![seg];
    let trials = 10_000;
    let collect = |m: usize, cfg: &LearnerConfig, rng: &mut SeedRng| {
        let mut vals = Vec::with_capacity(trials);
        for _ in 0..trials {
            let noises = svg0_draw_noises(&batch, 2, 1, m, rng);
            vals.push(svg0_policy_loss(&state, &batch, cfg, &noises, None).unwrap());
        }
        vals
    };
    let a = collect(1, &cfg1, &mut rng);
    let b = collect(16, &cfg16, &mut rng);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64], m: f64| v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(&a), mean(&b));
    let se = (var(&a, ma) / trials as f64 + var(&b, mb) / trials as f64).sqrt();
    assert!((ma - mb).abs() < 4.0 * se, "means {ma} vs {mb}, se {se}");
}

#[test]
fn onpolicy_matches_degenerate_replay_run() {
    // K=1, alpha=0, fresh targets: the replay learner on a just-collected
    // segment and the on-policy learner perform the same update.
    let cfg = LearnerConfig { q_samples: 2, ..learner_cfg(0.0, 0.0) };
    let state = cont_state(11, PriorKind::IsoGaussian, false, &cfg);
    let mut rng = SeedRng::seed_from_u64(12);
    let seg = rand_cont_segment(&mut rng, 1, false);
    let noises = svg0_draw_noises(std::slice::from_ref(&seg), 2, 1, cfg.q_samples, &mut rng);

    let mut svg = state.clone();
    svg0_update_with_noises(&mut svg, std::slice::from_ref(&seg), &cfg, &noises).unwrap();
    let mut onp = state.clone();
    onpolicy_update_with_noises(&mut onp, &seg, &cfg, &noises).unwrap();

    for (a, b) in svg.stack.hl_params.values().iter().zip(onp.stack.hl_params.values()) {
        assert!((a - b).abs() < 1e-10, "hl {a} vs {b}");
    }
    for (a, b) in svg.stack.ll_params.values().iter().zip(onp.stack.ll_params.values()) {
        assert!((a - b).abs() < 1e-10, "ll {a} vs {b}");
    }
    for (a, b) in svg.value_params.values().iter().zip(onp.value_params.values()) {
        assert!((a - b).abs() < 1e-10, "value {a} vs {b}");
    }
}

#[test]
fn onpolicy_policy_gradient_matches_finite_differences() {
    let cfg = learner_cfg(0.25, 0.0);
    let state = cont_state(13, PriorKind::IsoGaussian, false, &cfg);
    let mut rng = SeedRng::seed_from_u64(14);
    let seg = rand_cont_segment(&mut rng, 2, false);
    let noises = svg0_draw_noises(std::slice::from_ref(&seg), 2, 1, cfg.q_samples, &mut rng);
    let batch = [seg.clone()];
    let frozen = {
        // Base latents under the online critic path.
        let noises_ref = &noises;
        let s = &state;
        let eval_frozen = svg0_base_latents(s, &batch, noises_ref).unwrap();
        eval_frozen
    };
    let (g_hl, g_ll) = onpolicy_policy_gradients(&state, &seg, &cfg, &noises).unwrap();
    let hl_loss = |p: &ParamVector| {
        let mut s = state.clone();
        s.stack.hl_params = p.clone();
        onpolicy_policy_loss(&s, &seg, &cfg, &noises, Some(&frozen)).unwrap()
    };
    let err = max_rel_error_fd(hl_loss, &state.stack.hl_params, g_hl.values(), 1e-5);
    assert!(err < 1e-4, "onpolicy hl gradient error {err}");
    let ll_loss = |p: &ParamVector| {
        let mut s = state.clone();
        s.stack.ll_params = p.clone();
        onpolicy_policy_loss(&s, &seg, &cfg, &noises, Some(&frozen)).unwrap()
    };
    let err = max_rel_error_fd(ll_loss, &state.stack.ll_params, g_ll.values(), 1e-5);
    assert!(err < 1e-4, "onpolicy ll gradient error {err}");
}

#[test]
fn zero_kl_configuration_is_alpha_invariant() {
    // With the HL pinned to the prior and a shared low level, every KL term
    // is zero, so the update cannot depend on alpha: targets reduce to the
    // plain bootstrapped returns.
    let mk_state = |cfg: &LearnerConfig| {
        let mut state = cont_state(15, PriorKind::IsoGaussian, false, cfg);
        state.stack.hl_params.fill(0.0);
        init_stddev_bias(&state.stack.hl_spec, &mut state.stack.hl_params, 1.0).unwrap();
        state.sync_targets();
        state
    };
    let mut rng = SeedRng::seed_from_u64(16);
    let seg = rand_cont_segment(&mut rng, 3, false);
    let noises = svg0_draw_noises(std::slice::from_ref(&seg), 2, 1, 2, &mut rng);

    let cfg_a = learner_cfg(0.0, 0.0);
    let mut sa = mk_state(&cfg_a);
    onpolicy_update_with_noises(&mut sa, &seg, &cfg_a, &noises).unwrap();

    let cfg_b = learner_cfg(1.7, 0.0);
    let mut sb = mk_state(&cfg_b);
    onpolicy_update_with_noises(&mut sb, &seg, &cfg_b, &noises).unwrap();

    for (a, b) in sa.value_params.values().iter().zip(sb.value_params.values()) {
        assert!((a - b).abs() < 1e-12);
    }
    for (a, b) in sa.stack.ll_params.values().iter().zip(sb.stack.ll_params.values()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn entropy_regularized_policy_loss_matches_independent_assembly() {
    // alpha = 0, shared LL, iso prior: the policy objective is exactly the
    // entropy-regularized SVG(0) loss, reassembled here from scratch.
    let cfg = learner_cfg(0.0, 0.13);
    let state = cont_state(17, PriorKind::IsoGaussian, false, &cfg);
    let mut rng = SeedRng::seed_from_u64(18);
    let seg = rand_cont_segment(&mut rng, 2, false);
    let batch = vec![seg.clone()];
    let noises = svg0_draw_noises(&batch, 2, 1, cfg.q_samples, &mut rng);
    let got = svg0_policy_loss(&state, &batch, &cfg, &noises, None).unwrap();

    let mut want = 0.0;
    for i in 0..seg.valid_len {
        let (z, _) = klrl_core::policy::hl_step(
            &state.stack,
            &seg.obs[i],
            &klrl_core::dist::NoiseDraw(noises.eps[0][i].clone()),
        )
        .unwrap();
        let dist = match ll_step(&state.stack, &z, &seg.obs[i]).unwrap() {
            ActionDist::Gaussian(d) => d,
            _ => unreachable!(),
        };
        let mut eq = 0.0;
        for draw in &noises.xi[0][i] {
            let a: Vec<f64> = dist
                .mean()
                .iter()
                .zip(dist.stddev())
                .zip(draw)
                .map(|((m, s), x)| m + s * x)
                .collect();
            let mut input = state.stack.asymmetry.view(klrl_core::policy::Consumer::Hl, &seg.obs[i]);
            input.extend_from_slice(&z);
            input.extend_from_slice(&a);
            eq += klrl_core::mlp::forward(&state.value_spec, &state.target_value, &input).unwrap()
                [0];
        }
        eq /= noises.xi[0][i].len() as f64;
        let entropy: f64 = dist
            .stddev()
            .iter()
            .map(|s| 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln()) + s.ln())
            .sum();
        want += eq + cfg.reg.alpha_h * entropy;
    }
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn frozen_groups_receive_no_update() {
    let mut cfg = learner_cfg(0.3, 0.01);
    cfg.frozen.ll = true;
    let mut state = cont_state(19, PriorKind::IsoGaussian, false, &cfg);
    let ll_before = state.stack.ll_params.clone();
    let hl_before = state.stack.hl_params.clone();
    let mut rng = SeedRng::seed_from_u64(20);
    let batch = vec![rand_cont_segment(&mut rng, 2, false)];
    svg0_update(&mut state, &batch, &cfg, &mut rng).unwrap();
    assert_eq!(state.stack.ll_params, ll_before, "frozen low level must not move");
    assert_ne!(state.stack.hl_params, hl_before, "unfrozen high level must move");
}

#[test]
fn non_finite_reward_skips_the_update() {
    let cfg = learner_cfg(0.1, 0.0);
    let mut state = cont_state(21, PriorKind::IsoGaussian, false, &cfg);
    let before = state.stack.hl_params.clone();
    let mut rng = SeedRng::seed_from_u64(22);
    let mut seg = rand_cont_segment(&mut rng, 2, false);
    seg.rewards[0] = f64::NAN;
    let diag = svg0_update(&mut state, std::slice::from_ref(&seg), &cfg, &mut rng).unwrap();
    assert!(diag.skipped);
    assert_eq!(state.stack.hl_params, before);
    assert_eq!(state.updates, 0);
}

// ---------------------------------------------------------------------------
// Discrete V-trace learner
// ---------------------------------------------------------------------------

fn disc_stack(seed: u64, latent_dim: usize, period: usize, hl_const_mean: Option<f64>) -> PolicyStack {
    let mut rng = SeedRng::seed_from_u64(seed);
    let dims = GroupDims { proprio: 0, task: 0, internal: 2, global: 4 };
    let mask = AsymmetryMask::new(
        vec![ObsGroup::Global],
        vec![ObsGroup::Internal],
        vec![],
        vec![ObsGroup::Internal],
    )
    .unwrap();
    let hl_spec = gaussian_net_spec(4, &[6], latent_dim, Activation::Elu).unwrap();
    let mut hl_params = ParamVector::init(&hl_spec, &mut rng);
    init_stddev_bias(&hl_spec, &mut hl_params, 1.0).unwrap();
    if let Some(c) = hl_const_mean {
        hl_params.fill(0.0);
        init_stddev_bias(&hl_spec, &mut hl_params, 1.0).unwrap();
        let mean_range = hl_spec.head_range("mean").unwrap();
        let last = hl_spec.num_layers() - 1;
        let b = hl_params.slice_mut(&format!("layer{last}.b")).unwrap();
        for slot in &mut b[mean_range] {
            *slot = c;
        }
    }
    let ll_spec = categorical_net_spec(2 + latent_dim, &[6], 4, Activation::Elu).unwrap();
    let ll_params = ParamVector::init(&ll_spec, &mut rng);
    PolicyStack {
        hl_spec,
        hl_params,
        ll_spec,
        ll_params,
        default_hl: PriorKind::IsoGaussian,
        default_ll: DefaultLl::Shared,
        latent_dim,
        latent_period: period,
        asymmetry: mask,
        action_space: ActionSpace::Discrete { n: 4 },
        group_dims: dims,
        hl_mean_bound: None,
        ll_mean_bound: None,
    }
}

fn rand_disc_obs(rng: &mut SeedRng) -> ObservationBundle {
    ObservationBundle {
        proprio: vec![],
        task: vec![],
        internal: (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        global: (0..4).map(|_| rng.gen_range(0.0..1.0)).collect(),
    }
}

fn rand_disc_segment(rng: &mut SeedRng, k: usize, start_step: usize) -> ReplaySegment {
    ReplaySegment {
        obs: (0..k).map(|_| rand_disc_obs(rng)).collect(),
        actions: (0..k).map(|_| ActionRecord::Discrete(rng.gen_range(0..4))).collect(),
        rewards: (0..k).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        behavior_log_probs: (0..k).map(|_| (1.0f64 / 4.0).ln()).collect(),
        bootstrap_obs: rand_disc_obs(rng),
        start_step,
        valid_len: k,
        terminal: false,
        latents: None,
    }
}

fn disc_cfg(alpha: f64, alpha_h: f64, period: usize) -> LearnerConfig {
    LearnerConfig {
        beta_pi: 1e-2,
        beta_q: 1e-2,
        beta_pi0: 1e-2,
        reg: RegularizerConfig { alpha, alpha_h, gamma: 0.95, latent_period: period },
        batch_size: 4,
        unroll_len: 10,
        target_period: 100,
        trace: TraceConfig::default(),
        q_samples: 1,
        frozen: FrozenSet::default(),
    }
}

#[test]
fn gated_kl_touches_only_resample_steps() {
    // Period 8, 10-step segment from t=1: resamples at t=1 and t=9 only.
    // With a constant HL mean c and unit stddev against the iso prior, each
    // gated KL is exactly latent_dim * c^2 / 2.
    let cfg = disc_cfg(1.0, 0.0, 8);
    let stack = disc_stack(23, 2, 8, Some(0.7));
    let value_spec = build_value_spec(&stack, &[6]).unwrap();
    let mut rng = SeedRng::seed_from_u64(24);
    let value_params = ParamVector::init(&value_spec, &mut rng);
    let mut state = LearnerState::new(stack, value_spec, value_params, &cfg).unwrap();
    let seg = rand_disc_segment(&mut rng, 10, 1);
    let diag = discrete_vtrace_update(&mut state, std::slice::from_ref(&seg), &cfg, &mut rng).unwrap();
    let per_resample = 2.0 * 0.7 * 0.7 / 2.0;
    let want = 2.0 * per_resample / 10.0; // two resamples averaged over 10 steps
    assert!((diag.kl_hl - want).abs() < 1e-10, "{} vs {want}", diag.kl_hl);
}

#[test]
fn misaligned_segments_are_rejected() {
    let cfg = disc_cfg(0.1, 0.0, 8);
    let stack = disc_stack(25, 2, 8, None);
    let value_spec = build_value_spec(&stack, &[6]).unwrap();
    let mut rng = SeedRng::seed_from_u64(26);
    let value_params = ParamVector::init(&value_spec, &mut rng);
    let mut state = LearnerState::new(stack, value_spec, value_params, &cfg).unwrap();
    let seg = rand_disc_segment(&mut rng, 10, 2);
    assert!(discrete_vtrace_update(&mut state, &[seg], &cfg, &mut rng).is_err());
}

#[test]
fn zero_rho_bar_freezes_the_policy() {
    let mut cfg = disc_cfg(0.0, 0.0, 1);
    cfg.trace = TraceConfig { lambda: 1.0, c_bar: 0.0, rho_bar: 0.0 };
    let stack = disc_stack(27, 2, 1, None);
    let value_spec = build_value_spec(&stack, &[6]).unwrap();
    let mut rng = SeedRng::seed_from_u64(28);
    let value_params = ParamVector::init(&value_spec, &mut rng);
    let mut state = LearnerState::new(stack, value_spec, value_params, &cfg).unwrap();
    let hl_before = state.stack.hl_params.clone();
    let ll_before = state.stack.ll_params.clone();
    let seg = rand_disc_segment(&mut rng, 10, 1);
    discrete_vtrace_update(&mut state, &[seg], &cfg, &mut rng).unwrap();
    assert_eq!(state.stack.hl_params, hl_before);
    assert_eq!(state.stack.ll_params, ll_before);
}

#[test]
fn bandit_policy_concentrates_on_the_rewarding_action() {
    // One-state bandit with two useful actions of four: action 0 pays 1.
    let mut cfg = disc_cfg(0.0, 0.0, 1);
    cfg.beta_pi = 5e-2;
    cfg.beta_q = 5e-2;
    let mut stack = disc_stack(29, 0, 1, None);
    // Flat stack: zero-dim latent.
    stack.hl_spec = MlpSpec::with_heads(
        vec![4, 0],
        Activation::Elu,
        vec![
            klrl_core::mlp::HeadSpec { name: "mean".into(), len: 0 },
            klrl_core::mlp::HeadSpec { name: "log_stddev".into(), len: 0 },
        ],
    )
    .unwrap();
    stack.hl_params = ParamVector::zeros(&stack.hl_spec);
    stack.latent_dim = 0;
    stack.ll_spec = categorical_net_spec(2, &[], 4, Activation::Identity).unwrap();
    let mut rng = SeedRng::seed_from_u64(30);
    stack.ll_params = ParamVector::init(&stack.ll_spec, &mut rng);
    stack.validate().unwrap();
    let value_spec = build_value_spec(&stack, &[]).unwrap();
    let value_params = ParamVector::init(&value_spec, &mut rng);
    let mut state = LearnerState::new(stack, value_spec, value_params, &cfg).unwrap();

    let obs = ObservationBundle {
        proprio: vec![],
        task: vec![],
        internal: vec![0.5, 0.5],
        global: vec![0.5, 0.5, 0.5, 0.5],
    };
    for _ in 0..1000 {
        let mut batch = Vec::new();
        for _ in 0..4 {
            let dist = match ll_step(&state.stack, &[], &obs).unwrap() {
                ActionDist::Categorical(c) => c,
                _ => unreachable!(),
            };
            let a = dist.sample(&mut rng);
            batch.push(ReplaySegment {
                obs: vec![obs.clone()],
                actions: vec![ActionRecord::Discrete(a)],
                rewards: vec![if a == 0 { 1.0 } else { 0.0 }],
                behavior_log_probs: vec![dist.log_prob(a).unwrap()],
                bootstrap_obs: obs.clone(),
                start_step: 1,
                valid_len: 1,
                terminal: true,
                latents: None,
            });
        }
        discrete_vtrace_update(&mut state, &batch, &cfg, &mut rng).unwrap();
    }
    let dist = match ll_step(&state.stack, &[], &obs).unwrap() {
        ActionDist::Categorical(c) => c,
        _ => unreachable!(),
    };
    let p0 = dist.probs()[0];
    assert!(p0 > 0.95, "policy should concentrate on action 0, got {p0}");
}

// ---------------------------------------------------------------------------
// Distillation
// ---------------------------------------------------------------------------

#[test]
fn iso_prior_distillation_is_a_no_op() {
    let cfg = learner_cfg(0.5, 0.0);
    let mut state = cont_state(31, PriorKind::IsoGaussian, false, &cfg);
    let before = state.clone();
    let mut rng = SeedRng::seed_from_u64(32);
    let batch = vec![rand_cont_segment(&mut rng, 2, false)];
    distill_update(&mut state, &batch, &cfg, &mut rng).unwrap();
    assert_eq!(state.stack.hl_params, before.stack.hl_params);
    assert_eq!(state.stack.ll_params, before.stack.ll_params);
    assert_eq!(state.value_params, before.value_params);
    assert_eq!(state.stack.default_hl, before.stack.default_hl);
}

#[test]
fn learned_prior_recovers_ar1_slope() {
    let spec = gaussian_net_spec(1, &[], 1, Activation::Identity).unwrap();
    let mut rng = SeedRng::seed_from_u64(33);
    let mut params = ParamVector::init(&spec, &mut rng);
    init_stddev_bias(&spec, &mut params, 1.0).unwrap();
    let mut prior = PriorKind::ArLearned { spec: spec.clone(), params };
    let mut opt = AdamState::new(spec.num_params(), 2e-2);
    let true_alpha: f64 = 0.9;
    let sd = (1.0 - true_alpha * true_alpha).sqrt();
    for _ in 0..3000 {
        let pairs: Vec<(DiagGaussian, Vec<f64>)> = (0..32)
            .map(|_| {
                let z_prev: f64 = rng.sample(rand_distr::StandardNormal);
                let agent =
                    DiagGaussian::new(vec![true_alpha * z_prev], vec![sd]).unwrap();
                (agent, vec![z_prev])
            })
            .collect();
        distill_pairs_update(&mut prior, &mut opt, &pairs).unwrap();
    }
    // Probe the learned slope.
    if let PriorKind::ArLearned { spec, params } = &prior {
        let at = |z: f64| {
            klrl_core::policy::gauss_eval(spec, params, &[z]).unwrap().dist.mean()[0]
        };
        let slope = (at(1.0) - at(-1.0)) / 2.0;
        assert!((slope - true_alpha).abs() < 0.05, "recovered slope {slope}");
    } else {
        unreachable!();
    }
}

#[test]
fn distillation_decreases_kl_on_a_fixed_batch() {
    let spec = gaussian_net_spec(1, &[4], 1, Activation::Elu).unwrap();
    let mut rng = SeedRng::seed_from_u64(34);
    let mut params = ParamVector::init(&spec, &mut rng);
    init_stddev_bias(&spec, &mut params, 1.0).unwrap();
    let mut prior = PriorKind::ArLearned { spec: spec.clone(), params };
    let mut opt = AdamState::new(spec.num_params(), 1e-2);
    let pairs: Vec<(DiagGaussian, Vec<f64>)> = (0..16)
        .map(|_| {
            let z_prev: f64 = rng.gen_range(-2.0..2.0);
            let agent = DiagGaussian::new(
                vec![0.5 * z_prev + 0.2],
                vec![rng.gen_range(0.3..1.2)],
            )
            .unwrap();
            (agent, vec![z_prev])
        })
        .collect();
    let mut losses = Vec::new();
    for _ in 0..100 {
        losses.push(distill_pairs_update(&mut prior, &mut opt, &pairs).unwrap());
    }
    let increases = losses.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
    assert!(losses.last().unwrap() < &(0.5 * losses[0]), "loss must shrink substantially");
    assert!(increases < 20, "loss trend must be nonincreasing, {increases} increases");
}
