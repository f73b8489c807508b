//! Bi-directional memory editing.
//!
//! Each episode is relabeled twice. The forward pass samples goals from the
//! positions the agent reached later in the same stage. The backward pass
//! first synthesizes the reversed trajectory (actions from the inverse model)
//! and samples goals from its future, i.e. positions the agent visited
//! earlier. Every emitted sample stands for the first step of a relabeled
//! segment that ends when the goal cell is first entered.
//!
//! The segment reward is `r' + (d_short - d_path)` with shaping enabled,
//! where `d_short` is the BFS distance from the sample's cell to the goal and
//! `d_path` the number of steps the trajectory took to get there. The stored
//! return is that reward discounted by `gamma^(d_path - 1)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Action, Environment, GridPos};
use crate::inverse::InverseModel;
use crate::replay::{GoalTransition, Transition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    /// Goals sampled per step and direction.
    pub k_goals: usize,
    /// Relabeled reach reward `r'`.
    pub reach_reward: f64,
    pub shaping: bool,
    pub gamma: f64,
    /// Only sample goals at most this many steps ahead.
    pub goal_window: Option<usize>,
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            k_goals: 4,
            reach_reward: 1.0,
            shaping: true,
            gamma: 0.99,
            goal_window: None,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_goals == 0 {
            return Err(Error::config("edit.k_goals", "must be at least 1"));
        }
        if !self.reach_reward.is_finite() {
            return Err(Error::config("edit.reach_reward", "must be finite"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("edit.gamma", "must lie in [0, 1)"));
        }
        if self.goal_window == Some(0) {
            return Err(Error::config("edit.goal_window", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EditMode {
    #[default]
    Bidirectional,
    ForwardOnly,
    None,
}

/// `r' + (dist_short - dist_st)`; an unreachable goal skips shaping.
pub fn shape_reward(r_prime: f64, dist_short: Option<u32>, dist_st: u32) -> f64 {
    match dist_short {
        Some(d) => r_prime + (d as f64 - dist_st as f64),
        None => r_prime,
    }
}

/// Source of reverse actions for the backward pass.
pub trait InverseDynamics {
    fn is_trained(&self) -> bool;
    /// Action moving the state `s_next` back to `s`.
    fn reverse_action(&self, s_next: &[f64], s: &[f64]) -> Result<Action>;
}

impl InverseDynamics for InverseModel {
    fn is_trained(&self) -> bool {
        InverseModel::is_trained(self)
    }

    fn reverse_action(&self, s_next: &[f64], s: &[f64]) -> Result<Action> {
        Ok(self.predict_inverse(s_next, s)?.action)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EditedBatch {
    pub forward: Vec<GoalTransition>,
    pub backward: Vec<GoalTransition>,
    /// Samples whose goal was unreachable by BFS, so shaping was skipped.
    pub shaping_skipped: usize,
}

impl EditedBatch {
    pub fn len(&self) -> usize {
        self.forward.len() + self.backward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_all(self) -> impl Iterator<Item = GoalTransition> {
        self.forward.into_iter().chain(self.backward)
    }
}

/// A step along a (possibly synthesized) path.
#[derive(Debug, Clone)]
struct PathStep {
    s: Vec<f64>,
    s_next: Vec<f64>,
    pos: GridPos,
    pos_next: GridPos,
    a: Action,
}

/// Splits an episode into per-stage runs of indices.
fn stage_segments(episode: &[Transition]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, tr) in episode.iter().enumerate() {
        let last = i + 1 == episode.len();
        if tr.stage_change || last || episode[i + 1].stage != tr.stage {
            out.push(start..i + 1);
            start = i + 1;
        }
    }
    out
}

/// The next-state features of a step as seen inside its own stage: a door
/// transition ends on the door cell, not on the next stage's start.
fn in_stage_next(env: &Environment, tr: &Transition) -> Vec<f64> {
    if tr.stage_change {
        env.encode_parts(tr.pos_next, tr.stage, tr.has_bonus)
    } else {
        tr.s_next.clone()
    }
}

fn relabel<R: Rng + ?Sized>(
    env: &Environment,
    stage: usize,
    path: &[PathStep],
    cfg: &EditConfig,
    rng: &mut R,
    skipped: &mut usize,
) -> Vec<GoalTransition> {
    let layout = env.layout(stage);
    let n = path.len();
    let mut out = Vec::with_capacity(n * cfg.k_goals);
    for t in 0..n {
        let end = match cfg.goal_window {
            Some(w) => n.min(t + w),
            None => n,
        };
        for _ in 0..cfg.k_goals {
            let j = rng.gen_range(t..end);
            let goal = path[j].pos_next;
            // First arrival at the goal along the path.
            let reach = (t..=j).find(|&i| path[i].pos_next == goal).unwrap_or(j);
            let dist_st = (reach - t + 1) as u32;
            let reward = if cfg.shaping {
                let d = layout.distance(path[t].pos, goal);
                if d.is_none() {
                    *skipped += 1;
                }
                shape_reward(cfg.reach_reward, d, dist_st)
            } else {
                cfg.reach_reward
            };
            let mut sg = path[t].s.clone();
            env.append_goal(&mut sg, stage, goal);
            let mut sg_next = path[t].s_next.clone();
            env.append_goal(&mut sg_next, stage, goal);
            out.push(GoalTransition {
                sg,
                a: path[t].a,
                r_shaped: reward,
                sg_next,
                done_g: path[t].pos_next == goal,
                steps_to_goal: dist_st,
                ret: cfg.gamma.powi(dist_st as i32 - 1) * reward,
            });
        }
    }
    out
}

/// Goal relabeling along the trajectory the agent actually walked.
pub fn edit_forward<R: Rng + ?Sized>(
    episode: &[Transition],
    env: &Environment,
    cfg: &EditConfig,
    rng: &mut R,
) -> Result<EditedBatch> {
    if episode.is_empty() {
        return Err(Error::usage("cannot edit an empty episode"));
    }
    let mut batch = EditedBatch::default();
    for seg in stage_segments(episode) {
        let stage = episode[seg.start].stage;
        let path: Vec<PathStep> = episode[seg]
            .iter()
            .map(|tr| PathStep {
                s: tr.s.clone(),
                s_next: in_stage_next(env, tr),
                pos: tr.pos,
                pos_next: tr.pos_next,
                a: tr.a,
            })
            .collect();
        batch
            .forward
            .extend(relabel(env, stage, &path, cfg, rng, &mut batch.shaping_skipped));
    }
    Ok(batch)
}

/// Goal relabeling along the synthesized reverse trajectory. Blocked steps
/// and stage transitions have no reverse and are dropped.
pub fn edit_backward<R: Rng + ?Sized>(
    episode: &[Transition],
    inverse: &dyn InverseDynamics,
    env: &Environment,
    cfg: &EditConfig,
    rng: &mut R,
) -> Result<EditedBatch> {
    if episode.is_empty() {
        return Err(Error::usage("cannot edit an empty episode"));
    }
    if !inverse.is_trained() {
        return Err(Error::state("inverse model has not been trained"));
    }
    let mut batch = EditedBatch::default();
    for seg in stage_segments(episode) {
        let stage = episode[seg.start].stage;
        let mut path = Vec::with_capacity(seg.len());
        for tr in episode[seg].iter().rev() {
            if tr.blocked() || tr.stage_change {
                continue;
            }
            path.push(PathStep {
                s: tr.s_next.clone(),
                s_next: tr.s.clone(),
                pos: tr.pos_next,
                pos_next: tr.pos,
                a: inverse.reverse_action(&tr.s_next, &tr.s)?,
            });
        }
        batch
            .backward
            .extend(relabel(env, stage, &path, cfg, rng, &mut batch.shaping_skipped));
    }
    Ok(batch)
}

/// Runs the configured passes over one episode.
pub fn edit_episode<R: Rng + ?Sized>(
    episode: &[Transition],
    mode: EditMode,
    inverse: &dyn InverseDynamics,
    env: &Environment,
    cfg: &EditConfig,
    rng: &mut R,
) -> Result<EditedBatch> {
    match mode {
        EditMode::None => Ok(EditedBatch::default()),
        EditMode::ForwardOnly => edit_forward(episode, env, cfg, rng),
        EditMode::Bidirectional => {
            let mut out = edit_forward(episode, env, cfg, rng)?;
            // Until the inverse model has seen data there is nothing to reverse.
            if inverse.is_trained() {
                let back = edit_backward(episode, inverse, env, cfg, rng)?;
                out.backward = back.backward;
                out.shaping_skipped += back.shaping_skipped;
            }
            Ok(out)
        }
    }
}
