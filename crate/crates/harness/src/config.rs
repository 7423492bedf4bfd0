//! Experiment configuration: a flat key/value text format with dotted keys
//! (`learner.alpha = 1e-3`). Defaults are baked in and every key is
//! overridable from a config file or the command line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};

use klrl_core::env::{GridConfig, PmConfig, PmTask};
use klrl_core::policy::ObsGroup;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    Grid,
    PmGoToTarget,
    PmMoveBox,
    PmCombinedAnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnerKind {
    Svg0,
    DiscreteVtrace,
    OnPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorChoice {
    Iso,
    Ar1,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferModeChoice {
    TaskSharedLl,
    TaskSeparateLl,
    Body,
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub env: EnvKind,
    pub grid_body_step: usize,
    pub grid_size: usize,
    pub pm_num_targets: usize,

    pub learner: LearnerKind,
    pub alpha: f64,
    pub alpha_h: f64,
    pub gamma: f64,
    pub beta_pi: f64,
    pub beta_q: f64,
    pub beta_pi0: f64,
    pub batch_size: usize,
    pub unroll_len: usize,
    pub target_period: u64,
    pub lambda: f64,
    pub c_bar: f64,
    pub rho_bar: f64,
    pub q_samples: usize,
    pub replay_capacity_steps: usize,

    pub latent_dim: usize,
    pub latent_period: usize,
    pub hl_hidden: Vec<usize>,
    pub ll_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    pub prior: PriorChoice,
    pub prior_ar_alpha: f64,
    pub prior_hidden: Vec<usize>,
    pub shared_ll: bool,
    pub hl_view: Vec<ObsGroup>,
    pub ll_view: Vec<ObsGroup>,
    pub default_hl_view: Vec<ObsGroup>,
    pub default_ll_view: Vec<ObsGroup>,
    pub init_hl_stddev: f64,
    pub init_ll_stddev: f64,
    /// Initial mean-head bias for continuous actions (exploration prior).
    pub init_action_mean: Vec<f64>,
    /// Smooth bound on latent mean heads; 0 disables.
    pub hl_mean_bound_scale: f64,
    /// Smooth bound on continuous action mean heads; 0 disables.
    pub ll_mean_bound_scale: f64,

    pub num_actors: usize,
    pub total_frames: u64,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub quasi_onpolicy: bool,
    pub updates_per_segment: f64,
    pub warmup_segments: usize,
    pub snapshot_refresh: u64,
    pub metrics_every_updates: u64,
    pub eval_every_frames: u64,
    pub eval_episodes: usize,
    pub checkpoint_every_updates: u64,

    pub transfer_checkpoint: Option<PathBuf>,
    pub transfer_mode: Option<TransferModeChoice>,

    pub klfield_goal: (i64, i64),
    pub klfield_prior_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvKind::Grid,
            grid_body_step: 1,
            grid_size: 8,
            pm_num_targets: 3,

            learner: LearnerKind::DiscreteVtrace,
            alpha: 1e-3,
            alpha_h: 1e-4,
            gamma: 0.99,
            beta_pi: 1e-4,
            beta_q: 1e-4,
            beta_pi0: 1e-4,
            batch_size: 512,
            unroll_len: 10,
            target_period: 100,
            lambda: 1.0,
            c_bar: 1.0,
            rho_bar: 1.0,
            q_samples: 1,
            replay_capacity_steps: 1_000_000,

            latent_dim: 10,
            latent_period: 1,
            hl_hidden: vec![200],
            ll_hidden: vec![200, 100],
            value_hidden: vec![400, 300],
            prior: PriorChoice::Iso,
            prior_ar_alpha: 0.9,
            prior_hidden: vec![],
            shared_ll: true,
            hl_view: vec![],
            ll_view: vec![],
            default_hl_view: vec![],
            default_ll_view: vec![],
            init_hl_stddev: 1.0,
            init_ll_stddev: 0.5,
            init_action_mean: vec![],
            hl_mean_bound_scale: 3.0,
            ll_mean_bound_scale: 1.0,

            num_actors: 32,
            total_frames: 2_000_000,
            seed: 0,
            out_dir: PathBuf::from("out"),
            quasi_onpolicy: false,
            updates_per_segment: 1.0,
            warmup_segments: 0,
            snapshot_refresh: 10,
            metrics_every_updates: 50,
            eval_every_frames: 10_000,
            eval_episodes: 100,
            checkpoint_every_updates: 0,

            transfer_checkpoint: None,
            transfer_mode: None,

            klfield_goal: (4, 4),
            klfield_prior_samples: 32,
        }
    }
}

fn parse_groups(s: &str) -> Result<Vec<ObsGroup>> {
    if s.trim().is_empty() || s.trim() == "none" {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|g| match g.trim() {
            "proprio" => Ok(ObsGroup::Proprio),
            "task" => Ok(ObsGroup::Task),
            "internal" => Ok(ObsGroup::Internal),
            "global" => Ok(ObsGroup::Global),
            other => bail!("unknown observation group `{other}`"),
        })
        .collect()
}

fn parse_sizes(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() || s.trim() == "none" {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|v| v.trim().parse::<usize>().context("bad layer size"))
        .collect()
}

impl ExperimentConfig {
    /// Parses a config file (lines of `key = value`, `#` comments allowed)
    /// on top of the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_str_overrides(&text)
    }

    pub fn from_str_overrides(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut pairs = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected `key = value`", lineno + 1))?;
            pairs.insert(key.trim().to_string(), value.trim().to_string());
        }
        // Environment first: it fixes view and period defaults that later
        // keys may still override.
        if let Some(env) = pairs.get("env.name") {
            cfg.set("env.name", env)?;
        }
        if let Some(v) = pairs.get("env.grid.body_step") {
            cfg.set("env.grid.body_step", v)?;
        }
        cfg.apply_env_defaults();
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Environment-specific view, latent, and network defaults. Called
    /// after `env.name` is known; explicit keys still win.
    pub fn apply_env_defaults(&mut self) {
        use ObsGroup::*;
        match self.env {
            EnvKind::Grid => {
                self.learner = LearnerKind::DiscreteVtrace;
                self.hl_view = vec![Global];
                self.ll_view = vec![Internal];
                self.default_hl_view = vec![];
                self.default_ll_view = vec![Internal];
                self.latent_period = self.grid_body_step;
                self.latent_dim = 4;
                self.hl_hidden = vec![64];
                self.ll_hidden = vec![64];
                self.value_hidden = vec![64];
            }
            EnvKind::PmGoToTarget | EnvKind::PmMoveBox | EnvKind::PmCombinedAnd => {
                self.learner = LearnerKind::Svg0;
                self.hl_view = vec![Proprio, Task];
                self.ll_view = vec![Proprio];
                self.default_hl_view = vec![];
                self.default_ll_view = vec![Proprio];
                self.latent_period = 1;
            }
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let parse_f64 = || v.parse::<f64>().with_context(|| format!("{key}: bad float `{v}`"));
        let parse_usize =
            || v.parse::<usize>().with_context(|| format!("{key}: bad integer `{v}`"));
        let parse_u64 = || v.parse::<u64>().with_context(|| format!("{key}: bad integer `{v}`"));
        let parse_bool = || match v {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => bail!("{key}: bad bool `{v}`"),
        };
        match key {
            "env.name" => {
                self.env = match v {
                    "grid" => EnvKind::Grid,
                    "pm_gtt" => EnvKind::PmGoToTarget,
                    "pm_movebox" => EnvKind::PmMoveBox,
                    "pm_and" => EnvKind::PmCombinedAnd,
                    _ => bail!("unknown env `{v}`"),
                };
            }
            "env.grid.body_step" => self.grid_body_step = parse_usize()?,
            "env.grid.size" => self.grid_size = parse_usize()?,
            "env.pm.num_targets" => self.pm_num_targets = parse_usize()?,

            "learner.kind" => {
                self.learner = match v {
                    "svg0" => LearnerKind::Svg0,
                    "vtrace" => LearnerKind::DiscreteVtrace,
                    "onpolicy" => LearnerKind::OnPolicy,
                    _ => bail!("unknown learner `{v}`"),
                };
            }
            "learner.alpha" => self.alpha = parse_f64()?,
            "learner.alpha_h" => self.alpha_h = parse_f64()?,
            "learner.gamma" => self.gamma = parse_f64()?,
            "learner.beta_pi" => self.beta_pi = parse_f64()?,
            "learner.beta_q" => self.beta_q = parse_f64()?,
            "learner.beta_pi0" => self.beta_pi0 = parse_f64()?,
            "learner.batch_size" => self.batch_size = parse_usize()?,
            "learner.unroll_len" => self.unroll_len = parse_usize()?,
            "learner.target_period" => self.target_period = parse_u64()?,
            "learner.lambda" => self.lambda = parse_f64()?,
            "learner.c_bar" => self.c_bar = parse_f64()?,
            "learner.rho_bar" => self.rho_bar = parse_f64()?,
            "learner.q_samples" => self.q_samples = parse_usize()?,
            "learner.replay_capacity" => self.replay_capacity_steps = parse_usize()?,

            "stack.latent_dim" => self.latent_dim = parse_usize()?,
            "stack.latent_period" => self.latent_period = parse_usize()?,
            "stack.hl_hidden" => self.hl_hidden = parse_sizes(v)?,
            "stack.ll_hidden" => self.ll_hidden = parse_sizes(v)?,
            "stack.value_hidden" => self.value_hidden = parse_sizes(v)?,
            "stack.prior" => {
                if let Some(alpha) = v.strip_prefix("ar1:") {
                    self.prior = PriorChoice::Ar1;
                    self.prior_ar_alpha = alpha.parse().context("bad AR parameter")?;
                } else {
                    self.prior = match v {
                        "iso" => PriorChoice::Iso,
                        "ar1" => PriorChoice::Ar1,
                        "learned" => PriorChoice::Learned,
                        _ => bail!("unknown prior `{v}`"),
                    };
                }
            }
            "stack.prior_hidden" => self.prior_hidden = parse_sizes(v)?,
            "stack.sharing" => {
                self.shared_ll = match v {
                    "shared" => true,
                    "separate" => false,
                    _ => bail!("sharing must be `shared` or `separate`"),
                };
            }
            "stack.hl_view" => self.hl_view = parse_groups(v)?,
            "stack.ll_view" => self.ll_view = parse_groups(v)?,
            "stack.default_hl_view" => self.default_hl_view = parse_groups(v)?,
            "stack.default_ll_view" => self.default_ll_view = parse_groups(v)?,
            "stack.init_hl_stddev" => self.init_hl_stddev = parse_f64()?,
            "stack.init_ll_stddev" => self.init_ll_stddev = parse_f64()?,
            "stack.hl_mean_bound" => self.hl_mean_bound_scale = parse_f64()?,
            "stack.ll_mean_bound" => self.ll_mean_bound_scale = parse_f64()?,
            "stack.init_action_mean" => {
                self.init_action_mean = if v.trim().is_empty() || v.trim() == "none" {
                    vec![]
                } else {
                    v.split(',')
                        .map(|x| x.trim().parse::<f64>().context("bad action mean"))
                        .collect::<Result<Vec<f64>>>()?
                };
            }

            "run.num_actors" => self.num_actors = parse_usize()?,
            "run.total_frames" => self.total_frames = parse_u64()?,
            "run.seed" => self.seed = parse_u64()?,
            "run.out_dir" => self.out_dir = PathBuf::from(v),
            "run.quasi_onpolicy" => self.quasi_onpolicy = parse_bool()?,
            "run.updates_per_segment" => self.updates_per_segment = parse_f64()?,
            "run.warmup_segments" => self.warmup_segments = parse_usize()?,
            "run.snapshot_refresh" => self.snapshot_refresh = parse_u64()?,
            "run.metrics_every_updates" => self.metrics_every_updates = parse_u64()?,
            "run.eval_every_frames" => self.eval_every_frames = parse_u64()?,
            "run.eval_episodes" => self.eval_episodes = parse_usize()?,
            "run.checkpoint_every_updates" => self.checkpoint_every_updates = parse_u64()?,

            "transfer.checkpoint" => self.transfer_checkpoint = Some(PathBuf::from(v)),
            "transfer.mode" => {
                self.transfer_mode = Some(match v {
                    "task_shared" => TransferModeChoice::TaskSharedLl,
                    "task_separate" => TransferModeChoice::TaskSeparateLl,
                    "body" => TransferModeChoice::Body,
                    _ => bail!("unknown transfer mode `{v}`"),
                });
            }

            "klfield.goal_x" => self.klfield_goal.0 = v.parse().context("bad goal x")?,
            "klfield.goal_y" => self.klfield_goal.1 = v.parse().context("bad goal y")?,
            "klfield.prior_samples" => self.klfield_prior_samples = parse_usize()?,

            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_actors == 0 {
            bail!("run.num_actors must be >= 1");
        }
        if self.env == EnvKind::Grid && self.learner == LearnerKind::Svg0 {
            bail!("the grid world needs the discrete learner");
        }
        if self.learner == LearnerKind::DiscreteVtrace
            && self.unroll_len % self.latent_period != 0
        {
            bail!(
                "unroll length {} must be a multiple of the latent period {} so segments stay \
                 aligned to latent resample steps",
                self.unroll_len,
                self.latent_period
            );
        }
        if self.transfer_mode.is_some() && self.transfer_checkpoint.is_none() {
            bail!("transfer runs need transfer.checkpoint");
        }
        Ok(())
    }

    pub fn hl_mean_bound(&self) -> Option<f64> {
        (self.hl_mean_bound_scale > 0.0).then_some(self.hl_mean_bound_scale)
    }

    pub fn ll_mean_bound(&self) -> Option<f64> {
        (self.ll_mean_bound_scale > 0.0).then_some(self.ll_mean_bound_scale)
    }

    pub fn grid_config(&self) -> GridConfig {
        GridConfig { size: self.grid_size, body_step: self.grid_body_step, ..GridConfig::default() }
    }

    pub fn pm_config(&self) -> PmConfig {
        match self.env {
            EnvKind::PmGoToTarget => PmConfig {
                task: PmTask::GoToTarget { num_targets: self.pm_num_targets },
                ..PmConfig::locomotion()
            },
            EnvKind::PmMoveBox => PmConfig {
                task: PmTask::MoveBox { num_targets: self.pm_num_targets.min(3) },
                ..PmConfig::manipulation()
            },
            EnvKind::PmCombinedAnd => PmConfig::combined_and(),
            EnvKind::Grid => unreachable!("grid runs use grid_config"),
        }
    }

    /// Canonical text form, written next to run outputs for reproducibility.
    pub fn render(&self) -> String {
        let groups = |g: &[ObsGroup]| {
            if g.is_empty() {
                "none".to_string()
            } else {
                g.iter()
                    .map(|g| match g {
                        ObsGroup::Proprio => "proprio",
                        ObsGroup::Task => "task",
                        ObsGroup::Internal => "internal",
                        ObsGroup::Global => "global",
                    })
                    .collect::<Vec<_>>()
                    .join(",")
            }
        };
        let sizes = |s: &[usize]| {
            if s.is_empty() {
                "none".to_string()
            } else {
                s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
            }
        };
        let mut out = String::new();
        let mut push = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        push("env.name", match self.env {
            EnvKind::Grid => "grid".into(),
            EnvKind::PmGoToTarget => "pm_gtt".into(),
            EnvKind::PmMoveBox => "pm_movebox".into(),
            EnvKind::PmCombinedAnd => "pm_and".into(),
        });
        push("env.grid.body_step", self.grid_body_step.to_string());
        push("env.grid.size", self.grid_size.to_string());
        push("env.pm.num_targets", self.pm_num_targets.to_string());
        push("learner.kind", match self.learner {
            LearnerKind::Svg0 => "svg0".into(),
            LearnerKind::DiscreteVtrace => "vtrace".into(),
            LearnerKind::OnPolicy => "onpolicy".into(),
        });
        push("learner.alpha", format!("{:e}", self.alpha));
        push("learner.alpha_h", format!("{:e}", self.alpha_h));
        push("learner.gamma", self.gamma.to_string());
        push("learner.beta_pi", format!("{:e}", self.beta_pi));
        push("learner.beta_q", format!("{:e}", self.beta_q));
        push("learner.beta_pi0", format!("{:e}", self.beta_pi0));
        push("learner.batch_size", self.batch_size.to_string());
        push("learner.unroll_len", self.unroll_len.to_string());
        push("learner.target_period", self.target_period.to_string());
        push("learner.lambda", self.lambda.to_string());
        push("learner.c_bar", self.c_bar.to_string());
        push("learner.rho_bar", self.rho_bar.to_string());
        push("learner.q_samples", self.q_samples.to_string());
        push("learner.replay_capacity", self.replay_capacity_steps.to_string());
        push("stack.latent_dim", self.latent_dim.to_string());
        push("stack.latent_period", self.latent_period.to_string());
        push("stack.hl_hidden", sizes(&self.hl_hidden));
        push("stack.ll_hidden", sizes(&self.ll_hidden));
        push("stack.value_hidden", sizes(&self.value_hidden));
        push("stack.prior", match self.prior {
            PriorChoice::Iso => "iso".into(),
            PriorChoice::Ar1 => format!("ar1:{}", self.prior_ar_alpha),
            PriorChoice::Learned => "learned".into(),
        });
        push("stack.prior_hidden", sizes(&self.prior_hidden));
        push("stack.sharing", if self.shared_ll { "shared".into() } else { "separate".into() });
        push("stack.hl_view", groups(&self.hl_view));
        push("stack.ll_view", groups(&self.ll_view));
        push("stack.default_hl_view", groups(&self.default_hl_view));
        push("stack.default_ll_view", groups(&self.default_ll_view));
        push("stack.hl_mean_bound", self.hl_mean_bound_scale.to_string());
        push("stack.ll_mean_bound", self.ll_mean_bound_scale.to_string());
        push("stack.init_hl_stddev", self.init_hl_stddev.to_string());
        push("stack.init_ll_stddev", self.init_ll_stddev.to_string());
        push(
            "stack.init_action_mean",
            if self.init_action_mean.is_empty() {
                "none".to_string()
            } else {
                self.init_action_mean.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
            },
        );
        push("run.num_actors", self.num_actors.to_string());
        push("run.total_frames", self.total_frames.to_string());
        push("run.seed", self.seed.to_string());
        push("run.quasi_onpolicy", self.quasi_onpolicy.to_string());
        push("run.updates_per_segment", self.updates_per_segment.to_string());
        push("run.warmup_segments", self.warmup_segments.to_string());
        push("run.snapshot_refresh", self.snapshot_refresh.to_string());
        push("run.metrics_every_updates", self.metrics_every_updates.to_string());
        push("run.eval_every_frames", self.eval_every_frames.to_string());
        push("run.eval_episodes", self.eval_episodes.to_string());
        out
    }
}
