//! Replay storage, truncated importance-weight traces, Retrace action-value
//! targets, V-trace state-value targets with infrequent latents, and target
//! parameter synchronization.
//!
//! Both target estimators run as O(K) backward recursions; their O(K²)
//! brute-force expansions live in the test suites as oracles.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::ParamVector;
use crate::policy::{ActionRecord, ObservationBundle};

/// A K-step unroll of (observation, action, reward, behavior log-likelihood)
/// plus the observation at t+K for bootstrapping.
///
/// Behavior log-probs are of actions only; latents sampled by the behavior
/// policy are not used for learning (`latents` is diagnostic-only).
/// Episodes shorter than the unroll produce a final segment with
/// `valid_len < len()` and zero-padded tails.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplaySegment {
    pub obs: Vec<ObservationBundle>,
    pub actions: Vec<ActionRecord>,
    pub rewards: Vec<f64>,
    pub behavior_log_probs: Vec<f64>,
    pub bootstrap_obs: ObservationBundle,
    /// Episode step index (1-based) of the first step in this segment.
    pub start_step: usize,
    /// Number of real steps; entries past it are padding.
    pub valid_len: usize,
    /// Whether the episode terminated inside this segment.
    pub terminal: bool,
    /// Latents sampled by the behavior policy, kept only for diagnostics.
    pub latents: Option<Vec<Vec<f64>>>,
}

impl ReplaySegment {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.len();
        if k == 0 {
            return Err(Error::config("empty segment"));
        }
        if self.obs.len() != k || self.actions.len() != k || self.behavior_log_probs.len() != k {
            return Err(Error::config("segment field lengths disagree"));
        }
        if self.valid_len == 0 || self.valid_len > k {
            return Err(Error::config("valid_len out of range"));
        }
        if self.start_step == 0 {
            return Err(Error::config("episode steps index from 1"));
        }
        Ok(())
    }
}

/// Bounded FIFO of segments with uniform sampling (with replacement).
/// Eviction is strictly oldest-first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    segments: std::collections::VecDeque<ReplaySegment>,
    capacity: usize,
}

impl ReplayBuffer {
    /// Capacity is in segments; callers convert from a step budget.
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayBuffer { segments: std::collections::VecDeque::new(), capacity }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn push(&mut self, segment: ReplaySegment) {
        if self.segments.len() == self.capacity {
            self.segments.pop_front();
        }
        self.segments.push_back(segment);
    }

    /// Uniform sample with replacement; errors when empty.
    pub fn sample<R: rand::Rng>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<ReplaySegment>> {
        if self.segments.is_empty() {
            return Err(Error::usage("cannot sample from an empty replay buffer"));
        }
        Ok((0..batch_size)
            .map(|_| self.segments[rng.gen_range(0..self.segments.len())].clone())
            .collect())
    }

    /// Pops the oldest `n` segments (quasi on-policy consumption).
    pub fn pop_oldest(&mut self, n: usize) -> Result<Vec<ReplaySegment>> {
        if self.segments.len() < n {
            return Err(Error::usage("not enough segments queued"));
        }
        Ok((0..n).map(|_| self.segments.pop_front().unwrap()).collect())
    }

    pub fn oldest(&self) -> Option<&ReplaySegment> {
        self.segments.front()
    }
}

/// Truncation coefficients for the trace estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    /// Retrace λ in [0, 1].
    pub lambda: f64,
    /// V-trace c̄ ≥ 1.
    pub c_bar: f64,
    /// V-trace ρ̄ ≥ 1.
    pub rho_bar: f64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig { lambda: 1.0, c_bar: 1.0, rho_bar: 1.0 }
    }
}

impl TraceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("lambda must be in [0, 1]"));
        }
        if !self.c_bar.is_finite() || !self.rho_bar.is_finite() || self.c_bar < 0.0 || self.rho_bar < 0.0
        {
            return Err(Error::config("truncation coefficients must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Retrace traces: `c_i = λ · min(1, exp(log_pi_i − log_mu_i))`.
pub fn traces(log_pi: &[f64], log_mu: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if log_pi.len() != log_mu.len() {
        return Err(Error::config("trace input lengths disagree"));
    }
    log_pi
        .iter()
        .zip(log_mu)
        .map(|(lp, lm)| {
            let ratio = (lp - lm).exp();
            if !ratio.is_finite() {
                return Err(Error::non_finite(format!(
                    "importance ratio exp({lp} - {lm}) is not finite"
                )));
            }
            Ok(lambda * ratio.min(1.0))
        })
        .collect()
}

/// Retrace action-value targets over one segment of length `n`:
///
/// `Q̂ᴿ_t = Q_t + Σ_{s≥t} γ^{s−t} (Π_{i=t+1..s} c_i) δ_s`
/// with `δ_s = r_s + γ (V̂_{s+1} − α·KL̂_{s+1}) − Q_s` and the empty product
/// equal to 1 at s = t.
///
/// `q[s]` is the target-network value at the stored action, `vhat_next[s]`
/// and `kl_next[s]` carry the step-(s+1) bootstrap value and KL (their last
/// entries belong to the bootstrap observation and are zero at terminals).
/// The KL at step s itself is excluded here and handled as a separate loss.
pub fn retrace_targets(
    rewards: &[f64],
    q: &[f64],
    vhat_next: &[f64],
    kl_next: &[f64],
    gamma: f64,
    alpha: f64,
    c: &[f64],
) -> Result<Vec<f64>> {
    let n = rewards.len();
    if q.len() != n || vhat_next.len() != n || kl_next.len() != n || c.len() != n {
        return Err(Error::config("retrace input lengths disagree"));
    }
    let mut targets = vec![0.0; n];
    let mut acc = 0.0; // Σ_{s≥t} γ^{s−t} (Π c) δ_s, built backward.
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * (vhat_next[t] - alpha * kl_next[t]) - q[t];
        acc = delta + if t + 1 < n { gamma * c[t + 1] * acc } else { 0.0 };
        targets[t] = q[t] + acc;
    }
    Ok(targets)
}

/// V-trace state-value targets with KL-adjusted bootstraps:
///
/// `v_s = V_s + Σ_{t≥s} γ^{t−s} (Π_{i=s..t−1} c_i) δ_t`
/// with `δ_t = ρ_t (r_t + γ (V_{t+1} − KLᵖ_{t+1}) − V_t)`,
/// `c_i = min(c̄, w_i)`, `ρ_i = min(ρ̄, w_i)`, `w_i = exp(log_pi − log_mu)`.
///
/// `values` has length n+1 (the last entry is the bootstrap value, zero at
/// terminals); `kl_p_next[t]` is the gated KL at step t+1. Returns the
/// targets and the truncated weights ρ for the policy gradient.
pub fn vtrace_targets(
    rewards: &[f64],
    values: &[f64],
    kl_p_next: &[f64],
    gamma: f64,
    cfg: &TraceConfig,
    log_pi: &[f64],
    log_mu: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    cfg.validate()?;
    let n = rewards.len();
    if values.len() != n + 1 || kl_p_next.len() != n || log_pi.len() != n || log_mu.len() != n {
        return Err(Error::config("vtrace input lengths disagree"));
    }
    let mut rho = vec![0.0; n];
    let mut cs = vec![0.0; n];
    for i in 0..n {
        let w = (log_pi[i] - log_mu[i]).exp();
        if !w.is_finite() {
            return Err(Error::non_finite("importance weight is not finite"));
        }
        rho[i] = w.min(cfg.rho_bar);
        cs[i] = w.min(cfg.c_bar);
    }
    let mut vs = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let delta = rho[t] * (rewards[t] + gamma * (values[t + 1] - kl_p_next[t]) - values[t]);
        acc = delta + gamma * cs[t] * acc;
        vs[t] = values[t] + acc;
    }
    Ok((vs, rho))
}

/// Target-network synchronization: fires once `counter > period`, after
/// which target parameter vectors must equal online ones bit-exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetSync {
    pub period: u64,
    counter: u64,
}

impl TargetSync {
    pub fn new(period: u64) -> Self {
        TargetSync { period, counter: 0 }
    }

    /// Counts one update; true iff targets must sync now.
    pub fn tick(&mut self) -> bool {
        self.counter += 1;
        if self.counter > self.period {
            self.counter = 0;
            true
        } else {
            false
        }
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }
}

/// Copies online parameters into the target copy when the sync fires.
pub fn target_sync_tick(sync: &mut TargetSync, online: &ParamVector, target: &mut ParamVector) -> bool {
    if sync.tick() {
        target.copy_from(online);
        true
    } else {
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{Activation, MlpSpec};
    use crate::SeedRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn on_policy_traces_are_one() {
        let lp = vec![-1.2, -0.3, -2.0];
        let c = traces(&lp, &lp, 1.0).unwrap();
        assert!(c.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn traces_truncate_ratios_above_one() {
        // ratio 2.0 truncates to 1.0.
        let c = traces(&[2.0f64.ln()], &[0.0], 1.0).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-15);
        let c = traces(&[2.0f64.ln()], &[0.0], 0.7).unwrap();
        assert!((c[0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn zero_lambda_cuts_all_traces() {
        let c = traces(&[0.3, -0.4], &[0.1, 0.0], 0.0).unwrap();
        assert_eq!(c, vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_ratio_is_an_error() {
        assert!(traces(&[1e9], &[-1e9], 1.0).is_err());
    }

    #[test]
    fn retrace_single_step_expansion() {
        // K = 1: Q̂ᴿ = r + γ(V̂ − α·KL̂).
        let t = retrace_targets(&[2.0], &[0.7], &[1.5], &[0.3], 0.9, 0.5, &[1.0]).unwrap();
        let want = 2.0 + 0.9 * (1.5 - 0.5 * 0.3);
        assert!((t[0] - want).abs() < 1e-15);
    }

    #[test]
    fn cut_traces_reduce_to_one_step_targets() {
        let n = 4;
        let rewards = vec![1.0, -0.5, 0.25, 2.0];
        let q = vec![0.3, 0.1, -0.2, 0.5];
        let vnext = vec![0.9, 0.8, 0.7, 0.6];
        let kl = vec![0.1, 0.2, 0.3, 0.4];
        let t =
            retrace_targets(&rewards, &q, &vnext, &kl, 0.95, 1.2, &vec![0.0; n]).unwrap();
        for i in 0..n {
            let want = rewards[i] + 0.95 * (vnext[i] - 1.2 * kl[i]);
            assert!((t[i] - want).abs() < 1e-14);
        }
    }

    /// Direct O(K²) expansion with explicit products.
    fn retrace_brute(
        rewards: &[f64],
        q: &[f64],
        vnext: &[f64],
        kl: &[f64],
        gamma: f64,
        alpha: f64,
        c: &[f64],
    ) -> Vec<f64> {
        let n = rewards.len();
        (0..n)
            .map(|t| {
                let mut acc = q[t];
                for s in t..n {
                    let mut coef = gamma.powi((s - t) as i32);
                    for ci in c.iter().take(s + 1).skip(t + 1) {
                        coef *= ci;
                    }
                    let delta = rewards[s] + gamma * (vnext[s] - alpha * kl[s]) - q[s];
                    acc += coef * delta;
                }
                acc
            })
            .collect()
    }

    #[test]
    fn retrace_recursion_matches_brute_force() {
        let mut rng = SeedRng::seed_from_u64(31);
        for _ in 0..200 {
            let n = 5;
            let rand_vec =
                |rng: &mut SeedRng, n: usize| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
            let rewards = rand_vec(&mut rng, n);
            let q = rand_vec(&mut rng, n);
            let vnext = rand_vec(&mut rng, n);
            let kl: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
            let c: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let gamma = rng.gen_range(0.5..0.999);
            let alpha = rng.gen_range(0.0..2.0);
            let fast = retrace_targets(&rewards, &q, &vnext, &kl, gamma, alpha, &c).unwrap();
            let slow = retrace_brute(&rewards, &q, &vnext, &kl, gamma, alpha, &c);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    /// Direct recursion from the published definition:
    /// v_s = V_s + δ_s + γ c_s (v_{s+1} − V_{s+1}).
    fn vtrace_reference(
        rewards: &[f64],
        values: &[f64],
        kl: &[f64],
        gamma: f64,
        cs: &[f64],
        rho: &[f64],
    ) -> Vec<f64> {
        let n = rewards.len();
        let mut vs = vec![0.0; n + 1];
        vs[n] = values[n];
        for t in (0..n).rev() {
            let delta = rho[t] * (rewards[t] + gamma * (values[t + 1] - kl[t]) - values[t]);
            vs[t] = values[t] + delta + gamma * cs[t] * (vs[t + 1] - values[t + 1]);
        }
        vs.truncate(n);
        vs
    }

    #[test]
    fn vtrace_on_policy_matches_direct_recursion() {
        let mut rng = SeedRng::seed_from_u64(33);
        let cfg = TraceConfig::default();
        for _ in 0..100 {
            let n = 6;
            let rewards: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let values: Vec<f64> = (0..=n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let kl: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.5)).collect();
            let lp: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..0.0)).collect();
            let gamma = 0.97;
            let (vs, rho) =
                vtrace_targets(&rewards, &values, &kl, gamma, &cfg, &lp, &lp).unwrap();
            assert!(rho.iter().all(|&r| (r - 1.0).abs() < 1e-13));
            let want = vtrace_reference(&rewards, &values, &kl, gamma, &vec![1.0; n], &rho);
            for (a, b) in vs.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn vtrace_zero_inputs_give_zero_targets() {
        let cfg = TraceConfig::default();
        let (vs, _) = vtrace_targets(
            &[0.0; 3],
            &[0.0; 4],
            &[0.0; 3],
            0.9,
            &cfg,
            &[-1.0; 3],
            &[-1.0; 3],
        )
        .unwrap();
        assert!(vs.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_rho_bar_disables_correction() {
        let cfg = TraceConfig { lambda: 1.0, c_bar: 0.0, rho_bar: 0.0 };
        let values = [0.4, -0.3, 0.2, 0.9];
        let (vs, rho) = vtrace_targets(
            &[1.0, 1.0, 1.0],
            &values,
            &[0.0; 3],
            0.9,
            &cfg,
            &[-0.5; 3],
            &[-1.0; 3],
        )
        .unwrap();
        assert!(rho.iter().all(|&r| r == 0.0));
        for (a, b) in vs.iter().zip(&values) {
            assert_eq!(a, b);
        }
    }

    fn dummy_segment(tag: f64) -> ReplaySegment {
        ReplaySegment {
            obs: vec![ObservationBundle::default()],
            actions: vec![ActionRecord::Discrete(0)],
            rewards: vec![tag],
            behavior_log_probs: vec![0.0],
            bootstrap_obs: ObservationBundle::default(),
            start_step: 1,
            valid_len: 1,
            terminal: false,
            latents: None,
        }
    }

    #[test]
    fn buffer_evicts_oldest_first() {
        let mut buf = ReplayBuffer::new(2);
        buf.push(dummy_segment(1.0));
        buf.push(dummy_segment(2.0));
        buf.push(dummy_segment(3.0));
        assert_eq!(buf.len(), 2);
        assert_eq!(buf.oldest().unwrap().rewards[0], 2.0);
    }

    #[test]
    fn sampling_empty_buffer_errors() {
        let buf = ReplayBuffer::new(4);
        let mut rng = SeedRng::seed_from_u64(0);
        assert!(buf.sample(1, &mut rng).is_err());
    }

    #[test]
    fn target_sync_fires_at_period_boundaries() {
        let mut sync = TargetSync::new(100);
        let mut fired = Vec::new();
        for update in 1..=300u64 {
            if sync.tick() {
                fired.push(update);
            }
        }
        assert_eq!(fired, vec![101, 202]);
    }

    #[test]
    fn target_sync_copies_bit_exactly() {
        let spec = MlpSpec::new(vec![3, 4], Activation::Elu).unwrap();
        let mut rng = SeedRng::seed_from_u64(2);
        let online = ParamVector::init(&spec, &mut rng);
        let mut target = ParamVector::zeros(&spec);
        let mut sync = TargetSync::new(0);
        assert!(target_sync_tick(&mut sync, &online, &mut target));
        for (a, b) in online.values().iter().zip(target.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
