//! Desk-scale tasks: the discrete 8×8 go-to-target grid world with n-step
//! bodies, and 2-D point-mass analogs of the continuous locomotion and
//! manipulation tasks (simplified kinematics in place of rigid-body
//! physics).
//!
//! Environment instances are independent; one instance per actor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{ActionRecord, ActionSpace, GroupDims, ObservationBundle};
use crate::SeedRng;

/// One environment transition.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub reward: f64,
    pub done: bool,
    pub obs: ObservationBundle,
}

/// Common environment surface driven by actors and evaluation loops.
pub trait Environment {
    fn reset(&mut self, rng: &mut SeedRng) -> ObservationBundle;
    fn step(&mut self, action: &ActionRecord, rng: &mut SeedRng) -> Result<StepOutcome>;
    fn group_dims(&self) -> GroupDims;
    fn action_space(&self) -> ActionSpace;
    /// Whether the current episode ended in task success.
    fn succeeded(&self) -> bool;
}

/// Line format for episode event logs: `t,action,reward,done`.
pub fn event_line(t: usize, action: &str, reward: f64, done: bool) -> String {
    format!("{t},{action},{reward},{done}")
}

// ---------------------------------------------------------------------------
// Grid world
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub size: usize,
    pub goal_reward: f64,
    pub step_penalty: f64,
    pub wall_penalty: f64,
    pub episode_cap: usize,
    /// Effective body step size n: consecutive same-direction actions needed
    /// for one cell of displacement.
    pub body_step: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            size: 8,
            goal_reward: 1.0,
            step_penalty: -0.1,
            wall_penalty: -0.2,
            episode_cap: 400,
            body_step: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GridAction {
    Up,
    Down,
    Left,
    Right,
}

pub const GRID_ACTIONS: [GridAction; 4] =
    [GridAction::Up, GridAction::Down, GridAction::Left, GridAction::Right];

impl GridAction {
    pub fn from_index(i: usize) -> Result<Self> {
        GRID_ACTIONS
            .get(i)
            .copied()
            .ok_or_else(|| Error::config(format!("grid action index {i} out of range")))
    }

    pub fn label(self) -> &'static str {
        match self {
            GridAction::Up => "up",
            GridAction::Down => "down",
            GridAction::Left => "left",
            GridAction::Right => "right",
        }
    }

    /// (axis, direction): axis 0 is x, axis 1 is y.
    fn delta(self) -> (usize, i64) {
        match self {
            GridAction::Up => (1, 1),
            GridAction::Down => (1, -1),
            GridAction::Left => (0, -1),
            GridAction::Right => (0, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridState {
    pub agent: (i64, i64),
    pub goal: (i64, i64),
    /// Per-axis wind-up counter in [-(n-1), n-1].
    pub internal: (i64, i64),
    pub steps: usize,
    pub done: bool,
    pub reached_goal: bool,
}

pub fn grid_reset(cfg: &GridConfig, rng: &mut SeedRng) -> GridState {
    let s = cfg.size as i64;
    let agent = (rng.gen_range(0..s), rng.gen_range(0..s));
    let goal = loop {
        let g = (rng.gen_range(0..s), rng.gen_range(0..s));
        if g != agent {
            break g;
        }
    };
    GridState { agent, goal, internal: (0, 0), steps: 0, done: false, reached_goal: false }
}

pub fn grid_observation(cfg: &GridConfig, state: &GridState) -> ObservationBundle {
    let denom = (cfg.size - 1).max(1) as f64;
    let n = cfg.body_step.max(1) as f64;
    ObservationBundle {
        proprio: vec![],
        task: vec![],
        internal: vec![state.internal.0 as f64 / n, state.internal.1 as f64 / n],
        global: vec![
            state.agent.0 as f64 / denom,
            state.agent.1 as f64 / denom,
            state.goal.0 as f64 / denom,
            state.goal.1 as f64 / denom,
        ],
    }
}

/// One primitive action. The action moves the internal coordinate; when it
/// would leave `[-(n-1), n-1]` an external one-cell move is attempted and
/// that axis resets to 0 (a wall hit still consumes the wind-up). Every
/// primitive action costs `step_penalty`; a blocked external move adds
/// `wall_penalty`; reaching the goal yields `goal_reward` and terminates.
pub fn grid_step(
    cfg: &GridConfig,
    state: &mut GridState,
    action: GridAction,
) -> Result<(f64, bool, ObservationBundle)> {
    if state.done {
        return Err(Error::usage("grid episode is already finished"));
    }
    let n = cfg.body_step as i64;
    let (axis, dir) = action.delta();
    let mut reward = cfg.step_penalty;
    state.steps += 1;

    let coord = if axis == 0 { &mut state.internal.0 } else { &mut state.internal.1 };
    let next = *coord + dir;
    if next.abs() > n - 1 {
        *coord = 0;
        let pos = if axis == 0 { &mut state.agent.0 } else { &mut state.agent.1 };
        let moved = *pos + dir;
        if moved < 0 || moved >= cfg.size as i64 {
            reward += cfg.wall_penalty;
        } else {
            *pos = moved;
        }
    } else {
        *coord = next;
    }

    if state.agent == state.goal {
        reward += cfg.goal_reward;
        state.done = true;
        state.reached_goal = true;
    } else if state.steps >= cfg.episode_cap {
        state.done = true;
    }
    Ok((reward, state.done, grid_observation(cfg, state)))
}

/// Grid world behind the generic [`Environment`] surface.
#[derive(Debug, Clone)]
pub struct GridEnv {
    pub cfg: GridConfig,
    pub state: GridState,
}

impl GridEnv {
    pub fn new(cfg: GridConfig) -> Self {
        let state = GridState {
            agent: (0, 0),
            goal: (1, 1),
            internal: (0, 0),
            steps: 0,
            done: true,
            reached_goal: false,
        };
        GridEnv { cfg, state }
    }

    pub fn group_dims_for(_cfg: &GridConfig) -> GroupDims {
        GroupDims { proprio: 0, task: 0, internal: 2, global: 4 }
    }
}

impl Environment for GridEnv {
    fn reset(&mut self, rng: &mut SeedRng) -> ObservationBundle {
        self.state = grid_reset(&self.cfg, rng);
        grid_observation(&self.cfg, &self.state)
    }

    fn step(&mut self, action: &ActionRecord, _rng: &mut SeedRng) -> Result<StepOutcome> {
        let idx = match action {
            ActionRecord::Discrete(i) => *i,
            ActionRecord::Continuous(_) => {
                return Err(Error::usage("grid world takes discrete actions"))
            }
        };
        let (reward, done, obs) = grid_step(&self.cfg, &mut self.state, GridAction::from_index(idx)?)?;
        Ok(StepOutcome { reward, done, obs })
    }

    fn group_dims(&self) -> GroupDims {
        Self::group_dims_for(&self.cfg)
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Discrete { n: 4 }
    }

    fn succeeded(&self) -> bool {
        self.state.reached_goal
    }
}

// ---------------------------------------------------------------------------
// Point mass
// ---------------------------------------------------------------------------

/// Continuous task family. `GoToTarget` rewards reaching the selected one of
/// `num_targets`; `MoveBox` rewards pushing the box onto the selected
/// target; `CombinedAnd` pays 10 per subtask (box on first target, agent at
/// second) plus a 50 bonus for both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PmTask {
    GoToTarget { num_targets: usize },
    MoveBox { num_targets: usize },
    CombinedAnd,
}

impl PmTask {
    fn num_targets(&self) -> usize {
        match self {
            PmTask::GoToTarget { num_targets } | PmTask::MoveBox { num_targets } => *num_targets,
            PmTask::CombinedAnd => 2,
        }
    }

    fn has_box(&self) -> bool {
        !matches!(self, PmTask::GoToTarget { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PmConfig {
    pub task: PmTask,
    /// Arena half-extent: 4.0 for locomotion (8×8), 1.5 for manipulation (3×3).
    pub arena_half: f64,
    pub k_fwd: f64,
    pub k_turn: f64,
    pub target_radius: f64,
    pub episode_cap: usize,
}

impl PmConfig {
    pub fn locomotion() -> Self {
        PmConfig {
            task: PmTask::GoToTarget { num_targets: 3 },
            arena_half: 4.0,
            k_fwd: 0.05,
            k_turn: 0.2,
            target_radius: 0.3,
            episode_cap: 400,
        }
    }

    pub fn manipulation() -> Self {
        PmConfig {
            task: PmTask::MoveBox { num_targets: 1 },
            arena_half: 1.5,
            k_fwd: 0.05,
            k_turn: 0.2,
            target_radius: 0.3,
            episode_cap: 400,
        }
    }

    pub fn combined_and() -> Self {
        PmConfig { task: PmTask::CombinedAnd, ..Self::manipulation() }
    }
}

const PM_SUCCESS_REWARD: f64 = 60.0;
const PM_SUBTASK_REWARD: f64 = 10.0;
const PM_BONUS_REWARD: f64 = 50.0;
const AGENT_RADIUS: f64 = 0.2;
const BOX_HALF: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmState {
    pub pos: (f64, f64),
    pub heading: f64,
    pub targets: Vec<(f64, f64)>,
    pub box_pos: Option<(f64, f64)>,
    pub selected: usize,
    pub steps: usize,
    pub done: bool,
    pub succeeded: bool,
    pub box_done: bool,
    pub agent_done: bool,
}

fn wrap_angle(a: f64) -> f64 {
    // Wraps to (−π, π].
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = a % two_pi;
    if a <= -std::f64::consts::PI {
        a += two_pi;
    } else if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}

pub fn pm_reset(cfg: &PmConfig, rng: &mut SeedRng) -> PmState {
    let half = cfg.arena_half;
    let place = |rng: &mut SeedRng| (rng.gen_range(-half..half), rng.gen_range(-half..half));
    let pos = place(rng);
    let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let targets: Vec<(f64, f64)> = (0..cfg.task.num_targets()).map(|_| place(rng)).collect();
    let box_pos = cfg.task.has_box().then(|| place(rng));
    let selected = rng.gen_range(0..targets.len());
    PmState {
        pos,
        heading,
        targets,
        box_pos,
        selected,
        steps: 0,
        done: false,
        succeeded: false,
        box_done: false,
        agent_done: false,
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Rotate `delta` into the agent frame.
fn egocentric(heading: f64, delta: (f64, f64)) -> (f64, f64) {
    let (c, s) = (heading.cos(), heading.sin());
    (c * delta.0 + s * delta.1, -s * delta.0 + c * delta.1)
}

pub fn pm_observation(cfg: &PmConfig, state: &PmState) -> ObservationBundle {
    let mut task = Vec::new();
    for t in &state.targets {
        let ego = egocentric(state.heading, (t.0 - state.pos.0, t.1 - state.pos.1));
        task.push(ego.0 / cfg.arena_half);
        task.push(ego.1 / cfg.arena_half);
    }
    if let Some(b) = state.box_pos {
        let ego = egocentric(state.heading, (b.0 - state.pos.0, b.1 - state.pos.1));
        task.push(ego.0 / cfg.arena_half);
        task.push(ego.1 / cfg.arena_half);
    }
    for i in 0..state.targets.len() {
        task.push(if i == state.selected { 1.0 } else { 0.0 });
    }
    ObservationBundle {
        proprio: vec![
            state.heading.cos(),
            state.heading.sin(),
            state.pos.0 / cfg.arena_half,
            state.pos.1 / cfg.arena_half,
        ],
        task,
        internal: vec![],
        global: vec![],
    }
}

pub fn pm_group_dims(cfg: &PmConfig) -> GroupDims {
    let nt = cfg.task.num_targets();
    let task = 2 * nt + if cfg.task.has_box() { 2 } else { 0 } + nt;
    GroupDims { proprio: 4, task, internal: 0, global: 0 }
}

/// Simplified kinematics: `heading += k_turn·a₁`, then the position advances
/// by `k_fwd·a₀` along the heading, clamped to the arena. An overlapping box
/// is pushed along the axis of deepest penetration.
pub fn pm_step(
    cfg: &PmConfig,
    state: &mut PmState,
    action: [f64; 2],
) -> Result<(f64, bool, ObservationBundle)> {
    if state.done {
        return Err(Error::usage("point-mass episode is already finished"));
    }
    if action.iter().any(|a| !a.is_finite()) {
        return Err(Error::non_finite("point-mass action must be finite"));
    }
    let fwd = action[0].clamp(-1.0, 1.0);
    let turn = action[1].clamp(-1.0, 1.0);
    state.steps += 1;
    state.heading = wrap_angle(state.heading + cfg.k_turn * turn);
    state.pos.0 = (state.pos.0 + cfg.k_fwd * fwd * state.heading.cos())
        .clamp(-cfg.arena_half, cfg.arena_half);
    state.pos.1 = (state.pos.1 + cfg.k_fwd * fwd * state.heading.sin())
        .clamp(-cfg.arena_half, cfg.arena_half);

    if let Some(b) = state.box_pos.as_mut() {
        let dx = b.0 - state.pos.0;
        let dy = b.1 - state.pos.1;
        let reach = AGENT_RADIUS + BOX_HALF;
        let pen_x = reach - dx.abs();
        let pen_y = reach - dy.abs();
        if pen_x > 0.0 && pen_y > 0.0 {
            if pen_x <= pen_y {
                b.0 += pen_x * dx.signum();
            } else {
                b.1 += pen_y * dy.signum();
            }
            b.0 = b.0.clamp(-cfg.arena_half, cfg.arena_half);
            b.1 = b.1.clamp(-cfg.arena_half, cfg.arena_half);
        }
    }

    let mut reward = 0.0;
    match cfg.task {
        PmTask::GoToTarget { .. } => {
            if dist(state.pos, state.targets[state.selected]) <= cfg.target_radius {
                reward += PM_SUCCESS_REWARD;
                state.done = true;
                state.succeeded = true;
            }
        }
        PmTask::MoveBox { .. } => {
            let b = state.box_pos.expect("move-box task has a box");
            if dist(b, state.targets[state.selected]) <= cfg.target_radius {
                reward += PM_SUCCESS_REWARD;
                state.done = true;
                state.succeeded = true;
            }
        }
        PmTask::CombinedAnd => {
            let b = state.box_pos.expect("combined task has a box");
            let agent_target = 1 - state.selected;
            if !state.box_done && dist(b, state.targets[state.selected]) <= cfg.target_radius {
                state.box_done = true;
                reward += PM_SUBTASK_REWARD;
            }
            if !state.agent_done
                && dist(state.pos, state.targets[agent_target]) <= cfg.target_radius
            {
                state.agent_done = true;
                reward += PM_SUBTASK_REWARD;
            }
            if state.box_done && state.agent_done {
                reward += PM_BONUS_REWARD;
                state.done = true;
                state.succeeded = true;
            }
        }
    }
    if !state.done && state.steps >= cfg.episode_cap {
        state.done = true;
    }
    Ok((reward, state.done, pm_observation(cfg, state)))
}

#[derive(Debug, Clone)]
pub struct PointMassEnv {
    pub cfg: PmConfig,
    pub state: PmState,
}

impl PointMassEnv {
    pub fn new(cfg: PmConfig) -> Self {
        let state = PmState {
            pos: (0.0, 0.0),
            heading: 0.0,
            targets: vec![(0.0, 0.0); cfg.task.num_targets()],
            box_pos: None,
            selected: 0,
            steps: 0,
            done: true,
            succeeded: false,
            box_done: false,
            agent_done: false,
        };
        PointMassEnv { cfg, state }
    }
}

impl Environment for PointMassEnv {
    fn reset(&mut self, rng: &mut SeedRng) -> ObservationBundle {
        self.state = pm_reset(&self.cfg, rng);
        pm_observation(&self.cfg, &self.state)
    }

    fn step(&mut self, action: &ActionRecord, _rng: &mut SeedRng) -> Result<StepOutcome> {
        let a = match action {
            ActionRecord::Continuous(v) if v.len() == 2 => [v[0], v[1]],
            ActionRecord::Continuous(_) => {
                return Err(Error::usage("point mass takes 2-dim actions"))
            }
            ActionRecord::Discrete(_) => {
                return Err(Error::usage("point mass takes continuous actions"))
            }
        };
        let (reward, done, obs) = pm_step(&self.cfg, &mut self.state, a)?;
        Ok(StepOutcome { reward, done, obs })
    }

    fn group_dims(&self) -> GroupDims {
        pm_group_dims(&self.cfg)
    }

    fn action_space(&self) -> ActionSpace {
        ActionSpace::Continuous { dim: 2 }
    }

    fn succeeded(&self) -> bool {
        self.state.succeeded
    }
}
