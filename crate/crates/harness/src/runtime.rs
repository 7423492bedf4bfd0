//! The multi-actor / single-learner loop: actors roll K-step segments with
//! parameter snapshots and push them into shared replay; the learner
//! samples batches, applies the configured update, and periodically
//! publishes fresh snapshots, metrics rows, evaluations, and checkpoints.
//!
//! With one actor the whole system runs as a strictly sequential,
//! deterministic loop (wall-clock seconds are reported as zero there so
//! metrics files are bit-reproducible).

use std::collections::VecDeque;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};

use klrl_core::dist::{sample_reparam, NoiseDraw};
use klrl_core::env::Environment;
use klrl_core::learner::{
    discrete_vtrace_update, onpolicy_update, svg0_update, Diagnostics, FrozenSet, LearnerState,
};
use klrl_core::offpolicy::{ReplayBuffer, ReplaySegment};
use klrl_core::policy::{
    hl_step, ll_step, ActionDist, ActionRecord, LatentState, ObservationBundle, PolicyStack,
};
use klrl_core::SeedRng;

use crate::assemble::{
    build_learner, build_transfer_learner, derive_rng, learner_config, learner_kind_tag, make_env,
};
use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, LearnerKind};

/// A versioned, immutable policy copy an actor evaluates against. The
/// version tag makes snapshot atomicity observable: every inference in a
/// segment uses one tag.
#[derive(Debug)]
pub struct PolicySnapshot {
    pub version: u64,
    pub stack: PolicyStack,
}

/// One row of the metrics CSV.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub learner_steps: u64,
    pub actor_env_steps: u64,
    pub return_mean: f64,
    pub return_stddev: f64,
    pub kl_hl: f64,
    pub kl_ll: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub distill_loss: f64,
    pub entropy: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "learner_steps,actor_env_steps,return_mean,return_stddev,kl_hl,kl_ll,policy_loss,value_loss,distill_loss,entropy,wall_seconds";

impl MetricsRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.learner_steps,
            self.actor_env_steps,
            self.return_mean,
            self.return_stddev,
            self.kl_hl,
            self.kl_ll,
            self.policy_loss,
            self.value_loss,
            self.distill_loss,
            self.entropy,
            self.wall_seconds
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalRow {
    pub learner_steps: u64,
    pub success_rate: f64,
    pub mean_return: f64,
}

/// Everything a finished run leaves behind.
pub struct RunOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub evals: Vec<EvalRow>,
    pub metrics_path: PathBuf,
    pub eval_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

impl RunOutcome {
    /// Best evaluation success rate observed during the run.
    pub fn best_success(&self) -> f64 {
        self.evals.iter().map(|e| e.success_rate).fold(0.0, f64::max)
    }

    /// First learner step at which the success rate reached `threshold`.
    pub fn frames_to_success(&self, threshold: f64) -> Option<u64> {
        self.evals.iter().find(|e| e.success_rate >= threshold).map(|e| e.learner_steps)
    }

    pub fn final_success(&self) -> f64 {
        self.evals.last().map(|e| e.success_rate).unwrap_or(0.0)
    }
}

/// One environment-owning rollout worker.
struct Actor {
    env: Box<dyn Environment + Send>,
    rng: SeedRng,
    latent: LatentState,
    obs: ObservationBundle,
    ep_return: f64,
    latent_dim: usize,
    period: usize,
}

impl Actor {
    fn new(mut env: Box<dyn Environment + Send>, mut rng: SeedRng, latent_dim: usize, period: usize) -> Self {
        let obs = env.reset(&mut rng);
        Actor {
            env,
            rng,
            latent: LatentState::begin_episode(latent_dim, period),
            obs,
            ep_return: 0.0,
            latent_dim,
            period,
        }
    }

    /// Rolls up to `k` steps under the snapshot, ending early at episode
    /// boundaries so segments never span episodes. Returns the segment plus
    /// any episode return completed during the roll.
    fn collect_segment(
        &mut self,
        snap: &PolicySnapshot,
        k: usize,
    ) -> Result<(ReplaySegment, Option<f64>, u64)> {
        let stack = &snap.stack;
        let start_step = self.latent.step_index + 1;
        let mut obs_seq = Vec::with_capacity(k);
        let mut actions = Vec::with_capacity(k);
        let mut rewards = Vec::with_capacity(k);
        let mut log_probs = Vec::with_capacity(k);
        let mut latents = Vec::with_capacity(k);
        let mut terminal = false;
        let mut finished_return = None;
        let mut steps_taken = 0u64;
        let mut bootstrap = self.obs.clone();

        for _ in 0..k {
            if self.latent.advance() {
                let eps = NoiseDraw::standard(self.latent_dim, &mut self.rng);
                let (z, _) = hl_step(stack, &self.obs, &eps).map_err(|e| anyhow!("{e}"))?;
                self.latent.install(z);
            }
            let dist = ll_step(stack, &self.latent.z, &self.obs).map_err(|e| anyhow!("{e}"))?;
            let (action, lp) = match dist {
                ActionDist::Gaussian(d) => {
                    let xi = NoiseDraw::standard(d.dim(), &mut self.rng);
                    let a = sample_reparam(&d, &xi).map_err(|e| anyhow!("{e}"))?;
                    let lp = d.log_prob(&a).map_err(|e| anyhow!("{e}"))?;
                    (ActionRecord::Continuous(a), lp)
                }
                ActionDist::Categorical(c) => {
                    let a = c.sample(&mut self.rng);
                    (ActionRecord::Discrete(a), c.log_prob(a).map_err(|e| anyhow!("{e}"))?)
                }
            };
            obs_seq.push(self.obs.clone());
            latents.push(self.latent.z.clone());
            let out = self.env.step(&action, &mut self.rng).map_err(|e| anyhow!("{e}"))?;
            actions.push(action);
            rewards.push(out.reward);
            log_probs.push(lp);
            self.ep_return += out.reward;
            steps_taken += 1;
            bootstrap = out.obs.clone();
            self.obs = out.obs;
            if out.done {
                terminal = true;
                finished_return = Some(self.ep_return);
                self.ep_return = 0.0;
                self.obs = self.env.reset(&mut self.rng);
                self.latent = LatentState::begin_episode(self.latent_dim, self.period);
                break;
            }
        }
        let valid_len = rewards.len();
        let segment = ReplaySegment {
            obs: obs_seq,
            actions,
            rewards,
            behavior_log_probs: log_probs,
            bootstrap_obs: bootstrap,
            start_step,
            valid_len,
            terminal,
            latents: Some(latents),
        };
        Ok((segment, finished_return, steps_taken))
    }
}

/// Greedy evaluation: mean latent, mean action (continuous) or argmax
/// (discrete), fresh deterministic seeds per evaluation round.
pub fn evaluate_policy(
    stack: &PolicyStack,
    cfg: &ExperimentConfig,
    episodes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut successes = 0usize;
    let mut total_return = 0.0;
    for ep in 0..episodes {
        let mut rng = derive_rng(seed, "eval-episode", ep as u64);
        let mut env = make_env(cfg);
        let mut obs = env.reset(&mut rng);
        let mut latent = LatentState::begin_episode(stack.latent_dim, stack.latent_period);
        let mut ep_return = 0.0;
        loop {
            if latent.advance() {
                let (z, dist) =
                    hl_step(stack, &obs, &NoiseDraw::zeros(stack.latent_dim)).map_err(|e| anyhow!("{e}"))?;
                debug_assert_eq!(&z, dist.mean());
                latent.install(z);
            }
            let dist = ll_step(stack, &latent.z, &obs).map_err(|e| anyhow!("{e}"))?;
            let action = match dist {
                ActionDist::Gaussian(d) => ActionRecord::Continuous(d.mean().to_vec()),
                ActionDist::Categorical(c) => ActionRecord::Discrete(c.argmax()),
            };
            let out = env.step(&action, &mut rng).map_err(|e| anyhow!("{e}"))?;
            ep_return += out.reward;
            obs = out.obs;
            if out.done {
                if env.succeeded() {
                    successes += 1;
                }
                total_return += ep_return;
                break;
            }
        }
    }
    Ok((successes as f64 / episodes as f64, total_return / episodes as f64))
}

struct DiagWindow {
    acc: Diagnostics,
    count: u64,
}

impl DiagWindow {
    fn new() -> Self {
        DiagWindow { acc: Diagnostics::default(), count: 0 }
    }

    fn push(&mut self, d: &Diagnostics) {
        self.acc.mean_reward += d.mean_reward;
        self.acc.kl_hl += d.kl_hl;
        self.acc.kl_ll += d.kl_ll;
        self.acc.entropy += d.entropy;
        self.acc.policy_loss += d.policy_loss;
        self.acc.value_loss += d.value_loss;
        self.acc.distill_loss += d.distill_loss;
        self.count += 1;
    }

    fn drain(&mut self) -> Diagnostics {
        let n = self.count.max(1) as f64;
        let out = Diagnostics {
            mean_reward: self.acc.mean_reward / n,
            kl_hl: self.acc.kl_hl / n,
            kl_ll: self.acc.kl_ll / n,
            entropy: self.acc.entropy / n,
            policy_loss: self.acc.policy_loss / n,
            value_loss: self.acc.value_loss / n,
            distill_loss: self.acc.distill_loss / n,
            skipped: false,
        };
        *self = DiagWindow::new();
        out
    }
}

fn returns_stats(window: &VecDeque<f64>) -> (f64, f64) {
    if window.is_empty() {
        return (0.0, 0.0);
    }
    let n = window.len() as f64;
    let mean = window.iter().sum::<f64>() / n;
    let var = window.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains per the configuration (fresh or transfer) and writes metrics,
/// evaluations, the resolved config, and the final checkpoint to the output
/// directory.
pub fn run_training(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    std::fs::write(cfg.out_dir.join("config.txt"), cfg.render())?;

    let (mut learner, frozen) = if cfg.transfer_mode.is_some() {
        let mut rng = derive_rng(cfg.seed, "learner-init", 0);
        build_transfer_learner(cfg, &mut rng)?
    } else {
        let mut rng = derive_rng(cfg.seed, "learner-init", 0);
        (build_learner(cfg, &mut rng)?, FrozenSet::default())
    };
    let lcfg = learner_config(cfg, frozen);

    if cfg.num_actors == 1 {
        run_single_actor(cfg, &mut learner, &lcfg)
    } else {
        run_multi_actor(cfg, &mut learner, &lcfg)
    }
}

struct RunLogs {
    metrics: Vec<MetricsRow>,
    evals: Vec<EvalRow>,
    metrics_file: std::fs::File,
    eval_file: std::fs::File,
}

impl RunLogs {
    fn new(cfg: &ExperimentConfig) -> Result<Self> {
        let mut metrics_file = std::fs::File::create(cfg.out_dir.join("metrics.csv"))?;
        writeln!(metrics_file, "{METRICS_HEADER}")?;
        let mut eval_file = std::fs::File::create(cfg.out_dir.join("eval.csv"))?;
        writeln!(eval_file, "learner_steps,success_rate,mean_return")?;
        Ok(RunLogs { metrics: Vec::new(), evals: Vec::new(), metrics_file, eval_file })
    }

    fn push_metrics(&mut self, row: MetricsRow) -> Result<()> {
        writeln!(self.metrics_file, "{}", row.to_csv())?;
        self.metrics.push(row);
        Ok(())
    }

    fn push_eval(&mut self, row: EvalRow) -> Result<()> {
        writeln!(self.eval_file, "{},{},{}", row.learner_steps, row.success_rate, row.mean_return)?;
        self.evals.push(row);
        Ok(())
    }
}

fn apply_update(
    learner: &mut LearnerState,
    kind: LearnerKind,
    batch: &[ReplaySegment],
    lcfg: &klrl_core::learner::LearnerConfig,
    rng: &mut SeedRng,
) -> Result<Diagnostics> {
    let diag = match kind {
        LearnerKind::Svg0 => svg0_update(learner, batch, lcfg, rng),
        LearnerKind::DiscreteVtrace => discrete_vtrace_update(learner, batch, lcfg, rng),
        LearnerKind::OnPolicy => onpolicy_update(learner, &batch[0], lcfg, rng),
    }
    .map_err(|e| anyhow!("{e}"))?;
    if diag.skipped {
        eprintln!("warning: update skipped due to non-finite loss");
    }
    Ok(diag)
}

fn finish_run(
    cfg: &ExperimentConfig,
    learner: &LearnerState,
    lcfg: &klrl_core::learner::LearnerConfig,
    mut logs: RunLogs,
    learner_frames: u64,
) -> Result<RunOutcome> {
    let eval_seed = cfg.seed ^ 0x5eed_0e7a;
    let (success, mean_return) =
        evaluate_policy(&learner.stack, cfg, cfg.eval_episodes, eval_seed ^ learner_frames)?;
    logs.push_eval(EvalRow { learner_steps: learner_frames, success_rate: success, mean_return })?;

    let ckpt = Checkpoint::new(
        learner_kind_tag(cfg.learner),
        &learner.stack,
        &learner.value_spec,
        &learner.value_params,
        &lcfg.frozen,
    );
    let checkpoint_path = cfg.out_dir.join("checkpoint.json");
    ckpt.save(&checkpoint_path)?;
    Ok(RunOutcome {
        checkpoint: ckpt,
        metrics: logs.metrics,
        evals: logs.evals,
        metrics_path: cfg.out_dir.join("metrics.csv"),
        eval_path: cfg.out_dir.join("eval.csv"),
        checkpoint_path,
    })
}

/// Deterministic single-context loop: one actor interleaved with the
/// learner, all randomness derived from the run seed.
fn run_single_actor(
    cfg: &ExperimentConfig,
    learner: &mut LearnerState,
    lcfg: &klrl_core::learner::LearnerConfig,
) -> Result<RunOutcome> {
    let mut logs = RunLogs::new(cfg)?;
    let mut actor = Actor::new(
        make_env(cfg),
        derive_rng(cfg.seed, "actor", 0),
        learner.stack.latent_dim,
        learner.stack.latent_period,
    );
    let mut learner_rng = derive_rng(cfg.seed, "learner", 0);
    let mut buffer = ReplayBuffer::new(
        (cfg.replay_capacity_steps / cfg.unroll_len.max(1)).max(cfg.batch_size.max(1)),
    );
    let mut returns: VecDeque<f64> = VecDeque::with_capacity(100);
    let mut diag_window = DiagWindow::new();

    let mut snapshot_version = 0u64;
    let mut snapshot = PolicySnapshot { version: snapshot_version, stack: learner.stack.clone() };
    let warmup = if cfg.warmup_segments == 0 { cfg.batch_size } else { cfg.warmup_segments };

    let mut learner_frames = 0u64;
    let mut env_steps = 0u64;
    let mut updates = 0u64;
    let mut update_budget = 0.0f64;
    let mut next_eval = cfg.eval_every_frames;
    let frames_per_update = (cfg.batch_size * cfg.unroll_len) as u64;

    while learner_frames < cfg.total_frames {
        let (segment, finished, steps) = actor.collect_segment(&snapshot, cfg.unroll_len)?;
        env_steps += steps;
        if let Some(r) = finished {
            if returns.len() == 100 {
                returns.pop_front();
            }
            returns.push_back(r);
        }

        let mut did_update = false;
        if cfg.learner == LearnerKind::OnPolicy {
            let diag = apply_update(learner, cfg.learner, &[segment], lcfg, &mut learner_rng)?;
            diag_window.push(&diag);
            learner_frames += cfg.unroll_len as u64;
            updates += 1;
            did_update = true;
        } else if cfg.quasi_onpolicy {
            buffer.push(segment);
            while buffer.len() >= cfg.batch_size {
                let batch = buffer.pop_oldest(cfg.batch_size).map_err(|e| anyhow!("{e}"))?;
                let diag = apply_update(learner, cfg.learner, &batch, lcfg, &mut learner_rng)?;
                diag_window.push(&diag);
                learner_frames += frames_per_update;
                updates += 1;
                did_update = true;
            }
        } else {
            buffer.push(segment);
            update_budget += cfg.updates_per_segment;
            if buffer.len() >= warmup {
                while update_budget >= 1.0 {
                    update_budget -= 1.0;
                    let batch = buffer
                        .sample(cfg.batch_size, &mut learner_rng)
                        .map_err(|e| anyhow!("{e}"))?;
                    let diag = apply_update(learner, cfg.learner, &batch, lcfg, &mut learner_rng)?;
                    diag_window.push(&diag);
                    learner_frames += frames_per_update;
                    updates += 1;
                    did_update = true;
                }
            }
        }

        if did_update {
            if updates % cfg.snapshot_refresh.max(1) == 0 {
                snapshot_version += 1;
                snapshot =
                    PolicySnapshot { version: snapshot_version, stack: learner.stack.clone() };
            }
            if updates % cfg.metrics_every_updates.max(1) == 0 {
                let d = diag_window.drain();
                let (rm, rs) = returns_stats(&returns);
                logs.push_metrics(MetricsRow {
                    learner_steps: learner_frames,
                    actor_env_steps: env_steps,
                    return_mean: rm,
                    return_stddev: rs,
                    kl_hl: d.kl_hl,
                    kl_ll: d.kl_ll,
                    policy_loss: d.policy_loss,
                    value_loss: d.value_loss,
                    distill_loss: d.distill_loss,
                    entropy: d.entropy,
                    wall_seconds: 0.0,
                })?;
            }
            while learner_frames >= next_eval {
                let (success, mean_return) = evaluate_policy(
                    &learner.stack,
                    cfg,
                    cfg.eval_episodes,
                    cfg.seed ^ next_eval,
                )?;
                logs.push_eval(EvalRow {
                    learner_steps: next_eval,
                    success_rate: success,
                    mean_return,
                })?;
                next_eval += cfg.eval_every_frames;
            }
            if cfg.checkpoint_every_updates > 0 && updates % cfg.checkpoint_every_updates == 0 {
                Checkpoint::new(
                    learner_kind_tag(cfg.learner),
                    &learner.stack,
                    &learner.value_spec,
                    &learner.value_params,
                    &lcfg.frozen,
                )
                .save(&cfg.out_dir.join(format!("checkpoint_{updates}.json")))?;
            }
        }
    }
    finish_run(cfg, learner, lcfg, logs, learner_frames)
}

/// Threaded actors feeding a shared buffer; the learner runs on the calling
/// thread. Non-deterministic by nature.
fn run_multi_actor(
    cfg: &ExperimentConfig,
    learner: &mut LearnerState,
    lcfg: &klrl_core::learner::LearnerConfig,
) -> Result<RunOutcome> {
    let mut logs = RunLogs::new(cfg)?;
    let shared = Arc::new(SharedState {
        buffer: Mutex::new(ReplayBuffer::new(
            (cfg.replay_capacity_steps / cfg.unroll_len.max(1)).max(2 * cfg.batch_size.max(1)),
        )),
        snapshot: RwLock::new(Arc::new(PolicySnapshot {
            version: 0,
            stack: learner.stack.clone(),
        })),
        stop: AtomicBool::new(false),
        env_steps: AtomicU64::new(0),
        queued: AtomicU64::new(0),
        returns: Mutex::new(VecDeque::with_capacity(100)),
    });
    let start = Instant::now();
    let warmup = if cfg.warmup_segments == 0 { cfg.batch_size } else { cfg.warmup_segments };
    let quasi = cfg.quasi_onpolicy || cfg.learner == LearnerKind::OnPolicy;

    std::thread::scope(|scope| -> Result<RunOutcome> {
        for a in 0..cfg.num_actors {
            let shared = Arc::clone(&shared);
            let cfg = cfg.clone();
            scope.spawn(move || {
                let mut actor = Actor::new(
                    make_env(&cfg),
                    derive_rng(cfg.seed, "actor", a as u64),
                    cfg.latent_dim,
                    cfg.latent_period,
                );
                while !shared.stop.load(Ordering::Relaxed) {
                    // Backpressure for fresh-data modes: keep at most two
                    // batches queued so data stays near on-policy.
                    if quasi && shared.queued.load(Ordering::Relaxed) >= (2 * cfg.batch_size) as u64
                    {
                        std::thread::sleep(std::time::Duration::from_micros(200));
                        continue;
                    }
                    let snap = Arc::clone(&shared.snapshot.read().expect("snapshot lock").clone());
                    match actor.collect_segment(&snap, cfg.unroll_len) {
                        Ok((segment, finished, steps)) => {
                            shared.env_steps.fetch_add(steps, Ordering::Relaxed);
                            if let Some(r) = finished {
                                let mut w = shared.returns.lock().expect("returns lock");
                                if w.len() == 100 {
                                    w.pop_front();
                                }
                                w.push_back(r);
                            }
                            shared.buffer.lock().expect("buffer lock").push(segment);
                            shared.queued.fetch_add(1, Ordering::Relaxed);
                        }
                        Err(e) => {
                            eprintln!("actor {a} failed: {e}");
                            shared.stop.store(true, Ordering::Relaxed);
                        }
                    }
                }
            });
        }

        let mut learner_rng = derive_rng(cfg.seed, "learner", 0);
        let mut diag_window = DiagWindow::new();
        let mut learner_frames = 0u64;
        let mut updates = 0u64;
        let mut next_eval = cfg.eval_every_frames;
        let mut snapshot_version = 0u64;
        let frames_per_update = (cfg.batch_size * cfg.unroll_len) as u64;

        while learner_frames < cfg.total_frames {
            let batch = {
                let mut buf = shared.buffer.lock().expect("buffer lock");
                if quasi {
                    if buf.len() >= cfg.batch_size {
                        let b = buf.pop_oldest(cfg.batch_size).map_err(|e| anyhow!("{e}"))?;
                        shared.queued.fetch_sub(cfg.batch_size as u64, Ordering::Relaxed);
                        Some(b)
                    } else {
                        None
                    }
                } else if buf.len() >= warmup {
                    Some(buf.sample(cfg.batch_size, &mut learner_rng).map_err(|e| anyhow!("{e}"))?)
                } else {
                    None
                }
            };
            let Some(batch) = batch else {
                std::thread::sleep(std::time::Duration::from_micros(200));
                continue;
            };
            let diag = apply_update(learner, cfg.learner, &batch, lcfg, &mut learner_rng)?;
            diag_window.push(&diag);
            learner_frames += if cfg.learner == LearnerKind::OnPolicy {
                cfg.unroll_len as u64
            } else {
                frames_per_update
            };
            updates += 1;

            if updates % cfg.snapshot_refresh.max(1) == 0 {
                snapshot_version += 1;
                let snap =
                    Arc::new(PolicySnapshot { version: snapshot_version, stack: learner.stack.clone() });
                *shared.snapshot.write().expect("snapshot lock") = snap;
            }
            if updates % cfg.metrics_every_updates.max(1) == 0 {
                let d = diag_window.drain();
                let (rm, rs) = returns_stats(&shared.returns.lock().expect("returns lock"));
                logs.push_metrics(MetricsRow {
                    learner_steps: learner_frames,
                    actor_env_steps: shared.env_steps.load(Ordering::Relaxed),
                    return_mean: rm,
                    return_stddev: rs,
                    kl_hl: d.kl_hl,
                    kl_ll: d.kl_ll,
                    policy_loss: d.policy_loss,
                    value_loss: d.value_loss,
                    distill_loss: d.distill_loss,
                    entropy: d.entropy,
                    wall_seconds: start.elapsed().as_secs_f64(),
                })?;
            }
            while learner_frames >= next_eval {
                let (success, mean_return) =
                    evaluate_policy(&learner.stack, cfg, cfg.eval_episodes, cfg.seed ^ next_eval)?;
                logs.push_eval(EvalRow { learner_steps: next_eval, success_rate: success, mean_return })?;
                next_eval += cfg.eval_every_frames;
            }
        }
        shared.stop.store(true, Ordering::Relaxed);
        finish_run(cfg, learner, lcfg, logs, learner_frames)
    })
}

struct SharedState {
    buffer: Mutex<ReplayBuffer>,
    snapshot: RwLock<Arc<PolicySnapshot>>,
    stop: AtomicBool,
    env_steps: AtomicU64,
    queued: AtomicU64,
    returns: Mutex<VecDeque<f64>>,
}
