//! KL-reward field dump: for every grid cell and action direction, the
//! expected negative KL the agent would receive for moving that way under a
//! frozen high-level policy/default pair, for a fixed goal placement. After
//! pretraining the field forms a vector field over the grid.

use anyhow::{anyhow, bail, Result};

use klrl_core::dist::{kl_diag_gaussian, sample_reparam, NoiseDraw};
use klrl_core::env::{grid_observation, GridAction, GridConfig, GridState, GRID_ACTIONS};
use klrl_core::policy::{default_hl_step, hl_eval, ActionSpace, PolicyStack, PriorKind};

use crate::assemble::derive_rng;
use crate::checkpoint::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlFieldRow {
    pub cell: (i64, i64),
    pub action: GridAction,
    /// Expected negative KL (the KL reward) at the destination cell.
    pub kl_reward: f64,
}

pub const KLFIELD_HEADER: &str = "cell_x,cell_y,action,kl_reward";

fn observation_at(cfg: &GridConfig, agent: (i64, i64), goal: (i64, i64)) -> klrl_core::policy::ObservationBundle {
    let state = GridState {
        agent,
        goal,
        internal: (0, 0),
        steps: 0,
        done: false,
        reached_goal: false,
    };
    grid_observation(cfg, &state)
}

/// Expected KL(π_H(·|x_dest) ‖ π0_H(·|z_prev)) with z_prev drawn from the
/// high-level policy at the source cell (exact for the iso prior).
fn expected_kl(
    stack: &PolicyStack,
    grid: &GridConfig,
    src: (i64, i64),
    dest: (i64, i64),
    goal: (i64, i64),
    prior_samples: usize,
    seed: u64,
) -> Result<f64> {
    let dest_obs = observation_at(grid, dest, goal);
    let dest_dist = hl_eval(stack, &dest_obs).map_err(|e| anyhow!("{e}"))?.dist;
    match &stack.default_hl {
        PriorKind::IsoGaussian => {
            let prior = default_hl_step(
                &stack.default_hl,
                &vec![0.0; stack.latent_dim],
                stack.latent_dim,
                stack.hl_mean_bound,
            )
            .map_err(|e| anyhow!("{e}"))?;
            kl_diag_gaussian(&dest_dist, &prior).map_err(|e| anyhow!("{e}"))
        }
        PriorKind::Ar1 { .. } | PriorKind::ArLearned { .. } => {
            let src_obs = observation_at(grid, src, goal);
            let src_dist = hl_eval(stack, &src_obs).map_err(|e| anyhow!("{e}"))?.dist;
            let mut rng = derive_rng(seed, "klfield", (src.0 as u64) << 32 | src.1 as u64);
            let mut acc = 0.0;
            for _ in 0..prior_samples {
                let z_prev =
                    sample_reparam(&src_dist, &NoiseDraw::standard(stack.latent_dim, &mut rng))
                        .map_err(|e| anyhow!("{e}"))?;
                let prior =
                    default_hl_step(&stack.default_hl, &z_prev, stack.latent_dim, stack.hl_mean_bound)
                        .map_err(|e| anyhow!("{e}"))?;
                acc += kl_diag_gaussian(&dest_dist, &prior).map_err(|e| anyhow!("{e}"))?;
            }
            Ok(acc / prior_samples as f64)
        }
    }
}

/// Builds the full field: one row per (cell, action). Wall-blocked moves
/// keep the agent in place, so their destination is the source cell.
pub fn kl_field(
    ckpt: &Checkpoint,
    grid: &GridConfig,
    goal: (i64, i64),
    prior_samples: usize,
    seed: u64,
) -> Result<Vec<KlFieldRow>> {
    if !matches!(ckpt.stack.action_space, ActionSpace::Discrete { .. }) {
        bail!("the KL field is defined for discrete grid checkpoints");
    }
    let size = grid.size as i64;
    if !(0..size).contains(&goal.0) || !(0..size).contains(&goal.1) {
        bail!("goal {goal:?} outside the {size}x{size} grid");
    }
    let mut rows = Vec::with_capacity(grid.size * grid.size * 4);
    for y in 0..size {
        for x in 0..size {
            for action in GRID_ACTIONS {
                let (dx, dy) = match action {
                    GridAction::Up => (0, 1),
                    GridAction::Down => (0, -1),
                    GridAction::Left => (-1, 0),
                    GridAction::Right => (1, 0),
                };
                let dest = ((x + dx).clamp(0, size - 1), (y + dy).clamp(0, size - 1));
                let kl = expected_kl(&ckpt.stack, grid, (x, y), dest, goal, prior_samples, seed)?;
                rows.push(KlFieldRow { cell: (x, y), action, kl_reward: -kl });
            }
        }
    }
    Ok(rows)
}

pub fn render_csv(rows: &[KlFieldRow]) -> String {
    let mut out = String::from(KLFIELD_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.cell.0,
            r.cell.1,
            r.action.label(),
            r.kl_reward
        ));
    }
    out
}

/// Fraction of non-goal cells whose best-KL-reward action strictly reduces
/// Manhattan distance to the goal (ties broken by the first maximum).
pub fn goalward_fraction(rows: &[KlFieldRow], goal: (i64, i64)) -> f64 {
    use std::collections::HashMap;
    let mut per_cell: HashMap<(i64, i64), Vec<&KlFieldRow>> = HashMap::new();
    for r in rows {
        per_cell.entry(r.cell).or_default().push(r);
    }
    let mut cells = 0usize;
    let mut goalward = 0usize;
    for (cell, entries) in per_cell {
        if cell == goal {
            continue;
        }
        cells += 1;
        let best = entries
            .iter()
            .max_by(|a, b| a.kl_reward.total_cmp(&b.kl_reward))
            .expect("four actions per cell");
        let (dx, dy) = match best.action {
            GridAction::Up => (0, 1),
            GridAction::Down => (0, -1),
            GridAction::Left => (-1, 0),
            GridAction::Right => (1, 0),
        };
        let dest = (cell.0 + dx, cell.1 + dy);
        let before = (cell.0 - goal.0).abs() + (cell.1 - goal.1).abs();
        let after = (dest.0 - goal.0).abs() + (dest.1 - goal.1).abs();
        if after < before {
            goalward += 1;
        }
    }
    goalward as f64 / cells.max(1) as f64
}
