//! The sub-goal network: a goal-conditioned self-imitation agent over
//! `state ++ goal`, trained only from the relabeled memory and kept apart
//! from the final-goal policy.

use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::asil::{AgentConfig, AsilAgent};
use crate::error::{Error, Result};
use crate::grid::{Action, EnvState, Environment, GridPos};
use crate::parallel::Exec;
use crate::replay::{GoalTransition, ReplayBuffer};

const CHECKPOINT_KIND: &str = "subgoal";

/// When the sub-goal network is optimized relative to the policy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// P updates after every episode, alongside the policy.
    #[default]
    Interleaved,
    /// All updates after policy training, on the accumulated memory.
    PostHoc,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub mean_loss: f64,
    /// Mean fraction of samples above the value estimate.
    pub mean_active: f64,
    pub losses: Vec<f64>,
}

/// Anything that can pick a move toward a cell.
pub trait GoalPolicy {
    fn goal_action(
        &self,
        env: &Environment,
        state: &EnvState,
        goal: GridPos,
        greedy: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Action>;
}

#[derive(Debug, Clone)]
pub struct SubgoalAgent {
    pub agent: AsilAgent,
    pub schedule: Schedule,
}

impl SubgoalAgent {
    pub fn new<R: Rng + ?Sized>(env: &Environment, cfg: AgentConfig, schedule: Schedule, rng: &mut R) -> Result<Self> {
        let agent = AsilAgent::new(env.state_dim() + Environment::GOAL_DIM, cfg, rng)?;
        Ok(SubgoalAgent { agent, schedule })
    }

    pub fn input_dim(&self) -> usize {
        self.agent.input_dim()
    }

    /// Fingerprint of both networks.
    pub fn checksum(&self) -> u64 {
        self.agent.policy.checksum() ^ self.agent.value.checksum().rotate_left(1)
    }

    /// `steps` self-imitation updates on minibatches of `batch` drawn from
    /// the relabeled memory.
    pub fn train(
        &mut self,
        ds: &mut ReplayBuffer<GoalTransition>,
        steps: usize,
        batch: usize,
        exec: Exec,
    ) -> Result<TrainReport> {
        if ds.is_empty() {
            return Err(Error::state("sub-goal memory is empty"));
        }
        if batch == 0 {
            return Err(Error::usage("minibatch size must be positive"));
        }
        let mut report = TrainReport {
            steps,
            ..TrainReport::default()
        };
        for _ in 0..steps {
            let sample = ds.sample(batch)?;
            let out = self.agent.sil_update(&sample, exec)?;
            report.losses.push(out.loss);
            report.mean_active += out.active;
        }
        if steps > 0 {
            report.mean_loss = report.losses.iter().sum::<f64>() / steps as f64;
            report.mean_active /= steps as f64;
        }
        Ok(report)
    }

    pub fn act_toward<R: Rng + ?Sized>(
        &self,
        env: &Environment,
        state: &EnvState,
        goal: GridPos,
        greedy: bool,
        rng: &mut R,
    ) -> Result<Action> {
        if !env.layout(state.stage).is_free(goal) {
            return Err(Error::usage(format!("goal {goal} is not a free cell")));
        }
        let x = env.encode(state, Some(goal));
        Ok(self.agent.act(&x, greedy, rng)?.0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.agent.save(path, CHECKPOINT_KIND)
    }

    pub fn load(path: &Path, env: &Environment) -> Result<Self> {
        let agent = AsilAgent::load(path, CHECKPOINT_KIND)?;
        let want = env.state_dim() + Environment::GOAL_DIM;
        if agent.input_dim() != want {
            return Err(Error::Format(format!(
                "checkpoint expects {} inputs, environment provides {want}",
                agent.input_dim()
            )));
        }
        Ok(SubgoalAgent {
            agent,
            schedule: Schedule::default(),
        })
    }
}

impl GoalPolicy for SubgoalAgent {
    fn goal_action(
        &self,
        env: &Environment,
        state: &EnvState,
        goal: GridPos,
        greedy: bool,
        rng: &mut dyn RngCore,
    ) -> Result<Action> {
        self.act_toward(env, state, goal, greedy, rng)
    }
}
