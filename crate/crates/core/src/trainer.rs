//! The training loop: simulate with the final-goal policy, train the inverse
//! model online, edit each finished episode into the sub-goal memory, then
//! run N policy updates and P sub-goal updates.
//!
//! Configuration is plain serde; [`RunConfig::from_flat_json`] and
//! [`RunConfig::set`] accept flat dotted keys such as `"edit.k_goals"`.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::asil::{AgentConfig, AsilAgent, RndPair};
use crate::editing::{edit_episode, EditConfig, EditMode, InverseDynamics};
use crate::error::{Error, Result};
use crate::grid::{EnvKind, Environment, Event};
use crate::inverse::InverseModel;
use crate::parallel::Exec;
use crate::replay::{
    compute_returns, GoalTransition, ReplayBuffer, SilSample, Transition, DEFAULT_GOAL_CAPACITY,
    DEFAULT_RETURN_CAPACITY,
};
use crate::subgoal::{Schedule, SubgoalAgent, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RndConfig {
    pub scale: f64,
    pub lr: f64,
}

impl Default for RndConfig {
    fn default() -> Self {
        RndConfig { scale: 0.1, lr: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InverseConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    /// Train once every this many environment steps; 0 disables training.
    pub every: usize,
}

impl Default for InverseConfig {
    fn default() -> Self {
        InverseConfig {
            hidden: vec![64],
            lr: crate::inverse::DEFAULT_INVERSE_LR,
            batch: crate::inverse::DEFAULT_INVERSE_BATCH,
            every: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `simple`, `key-door`, or a path to a layout file.
    pub env: String,
    pub horizon: Option<usize>,
    /// Episodes M.
    pub episodes: usize,
    /// Policy updates N per episode.
    pub policy_updates: usize,
    /// Sub-goal updates P per episode.
    pub subgoal_updates: usize,
    pub batch: usize,
    pub gamma: f64,
    pub seed: u64,
    pub edit: EditConfig,
    pub edit_mode: EditMode,
    pub schedule: Schedule,
    /// Ablation: the policy itself is also trained on the relabeled memory.
    pub policy_learns_subgoals: bool,
    pub rnd: RndConfig,
    pub agent: AgentConfig,
    pub subgoal: AgentConfig,
    pub inverse: InverseConfig,
    pub replay_capacity: usize,
    pub goal_capacity: usize,
    /// Number of most recent episodes kept verbatim.
    pub tail_episodes: usize,
    /// Sub-goal updates run at the end under the post-hoc schedule.
    pub posthoc_steps: usize,
    pub exec: Exec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: "simple".into(),
            horizon: None,
            episodes: 10_000,
            policy_updates: 4,
            subgoal_updates: 8,
            batch: 64,
            gamma: 0.99,
            seed: 0,
            edit: EditConfig::default(),
            edit_mode: EditMode::Bidirectional,
            schedule: Schedule::Interleaved,
            policy_learns_subgoals: false,
            rnd: RndConfig::default(),
            agent: AgentConfig {
                lr: 1e-3,
                beta: 1e-3,
                ..AgentConfig::default()
            },
            subgoal: AgentConfig {
                lr: 1e-3,
                ..AgentConfig::default()
            },
            inverse: InverseConfig::default(),
            replay_capacity: DEFAULT_RETURN_CAPACITY,
            goal_capacity: DEFAULT_GOAL_CAPACITY,
            tail_episodes: 300,
            posthoc_steps: 5_000,
            exec: Exec::Parallel,
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, x) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, x, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn insert_dotted(root: &mut Value, key: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(key, "is not a configuration section"))?;
        if i + 1 == parts.len() {
            obj.insert((*p).to_string(), v);
            return Ok(());
        }
        cur = obj.entry((*p).to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("gamma", "must lie in [0, 1)"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be positive"));
        }
        if self.replay_capacity == 0 {
            return Err(Error::config("replay_capacity", "must be positive"));
        }
        if self.goal_capacity == 0 {
            return Err(Error::config("goal_capacity", "must be positive"));
        }
        if self.horizon == Some(0) {
            return Err(Error::config("horizon", "must be positive"));
        }
        if !(self.rnd.scale.is_finite() && self.rnd.scale >= 0.0) {
            return Err(Error::config("rnd.scale", "must be finite and non-negative"));
        }
        if self.inverse.batch == 0 {
            return Err(Error::config("inverse.batch", "must be positive"));
        }
        for (name, a) in [("agent", &self.agent), ("subgoal", &self.subgoal)] {
            if !(a.lr.is_finite() && a.lr > 0.0) {
                return Err(Error::config(format!("{name}.lr"), "must be positive"));
            }
            if a.hidden.contains(&0) {
                return Err(Error::config(format!("{name}.hidden"), "widths must be positive"));
            }
        }
        self.edit.validate()
    }

    /// Flat `{"dotted.key": value}` view of the full configuration.
    pub fn to_flat(&self) -> Map<String, Value> {
        let mut out = Map::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Applies flat dotted-key entries on top of `self`.
    pub fn merge_flat(&self, entries: &Map<String, Value>) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for (k, v) in entries {
            insert_dotted(&mut root, k, v.clone())?;
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a flat dotted-key JSON object over the defaults.
    pub fn from_flat_json(text: &str) -> Result<Self> {
        match serde_json::from_str::<Value>(text)? {
            Value::Object(m) => RunConfig::default().merge_flat(&m),
            _ => Err(Error::config("config", "expected a JSON object")),
        }
    }

    /// Sets one dotted key from its textual value; the text is read as JSON
    /// when it parses, otherwise as a string.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut m = Map::new();
        m.insert(key.to_string(), v);
        *self = self.merge_flat(&m)?;
        Ok(())
    }

    pub fn environment(&self) -> Result<Environment> {
        let env = Environment::resolve(&self.env).map_err(|e| match e {
            Error::Config { reason, .. } => Error::config("env", reason),
            other => other,
        })?;
        Ok(match self.horizon {
            Some(h) => env.with_horizon(h),
            None => env,
        })
    }
}

/// Per-episode training metrics, one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub steps: usize,
    /// Extrinsic return, undiscounted.
    pub reward: f64,
    pub success: bool,
    pub stages_cleared: usize,
    pub bonus_mean: f64,
    pub edited: usize,
    pub policy_loss: f64,
    pub subgoal_loss: f64,
    pub inverse_loss: Option<f64>,
}

/// A goal sample whose goal slice is hidden, as seen by a goal-blind policy.
struct Stripped<'a> {
    tr: &'a GoalTransition,
    dim: usize,
}

impl SilSample for Stripped<'_> {
    fn input(&self) -> &[f64] {
        &self.tr.sg[..self.dim]
    }
    fn action(&self) -> crate::grid::Action {
        self.tr.a
    }
    fn target_return(&self) -> f64 {
        self.tr.ret
    }
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub env: Environment,
    pub policy: AsilAgent,
    pub subgoal: SubgoalAgent,
    pub inverse: InverseModel,
    pub rnd: RndPair,
    pub memory: ReplayBuffer<crate::replay::ReturnTransition>,
    pub goal_memory: ReplayBuffer<GoalTransition>,
    /// The last `tail_episodes` episodes.
    pub tail: VecDeque<Vec<Transition>>,
    /// Visit counts per stage, row-major.
    pub visits: Vec<Vec<u64>>,
    rng: ChaCha8Rng,
    episode: usize,
    env_steps: u64,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let env = cfg.environment()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dim = env.state_dim();
        let policy = AsilAgent::new(dim, cfg.agent.clone(), &mut rng)?;
        let subgoal = SubgoalAgent::new(&env, cfg.subgoal.clone(), cfg.schedule, &mut rng)?;
        let mut inverse = InverseModel::new(dim, &cfg.inverse.hidden, cfg.inverse.lr, &mut rng)?;
        inverse.batch = cfg.inverse.batch;
        let rnd = RndPair::new(dim, cfg.rnd.scale, cfg.rnd.lr, &mut rng)?;
        let memory = ReplayBuffer::new(cfg.replay_capacity, rng.gen())?;
        let goal_memory = ReplayBuffer::new(cfg.goal_capacity, rng.gen())?;
        let cells = (env.layout(1).width() * env.layout(1).height()) as usize;
        Ok(Trainer {
            visits: vec![vec![0; cells]; env.stage_count()],
            cfg,
            env,
            policy,
            subgoal,
            inverse,
            rnd,
            memory,
            goal_memory,
            tail: VecDeque::new(),
            rng,
            episode: 0,
            env_steps: 0,
        })
    }

    pub fn episodes_run(&self) -> usize {
        self.episode
    }

    /// Rolls out one episode with the current policy, without learning.
    pub fn collect(&mut self) -> Result<Vec<Transition>> {
        let env = &self.env;
        let mut state = env.reset();
        let mut episode = Vec::new();
        loop {
            let s = env.encode(&state, None);
            let (a, _) = self.policy.act(&s, false, &mut self.rng)?;
            let out = env.step(&state, a)?;
            let s_next = env.encode(&out.next, None);
            let bonus = self.rnd.bonus(&s_next)?;
            let w = env.layout(1).width();
            self.visits[out.next.stage - 1][(out.next.pos.y * w + out.next.pos.x) as usize] += 1;
            episode.push(Transition {
                s,
                a,
                r: out.reward + bonus,
                bonus,
                s_next,
                done: out.done,
                pos: state.pos,
                pos_next: out.entered,
                stage: state.stage,
                has_bonus: state.has_bonus,
                has_bonus_next: out.next.has_bonus,
                event: out.event,
                stage_change: out.next.stage != state.stage,
            });
            state = out.next;
            if out.done {
                return Ok(episode);
            }
        }
    }

    fn train_inverse(&mut self, episode: &[Transition]) -> Result<Option<f64>> {
        let mut last = None;
        for tr in episode {
            self.inverse.observe(tr);
            self.env_steps += 1;
            if self.cfg.inverse.every > 0 && self.env_steps.is_multiple_of(self.cfg.inverse.every as u64) {
                last = self.inverse.train_online(&mut self.rng)?.or(last);
            }
        }
        Ok(last)
    }

    fn train_rnd(&mut self, episode: &[Transition]) -> Result<()> {
        if self.cfg.rnd.scale == 0.0 {
            return Ok(());
        }
        let states: Vec<&[f64]> = episode.iter().map(|t| t.s_next.as_slice()).collect();
        for chunk in states.chunks(self.cfg.batch) {
            self.rnd.update(chunk)?;
        }
        Ok(())
    }

    /// One full iteration: simulation, inverse training, editing, learning.
    pub fn run_episode(&mut self) -> Result<EpisodeMetrics> {
        let episode = self.collect()?;
        let inverse_loss = self.train_inverse(&episode)?;
        self.train_rnd(&episode)?;

        let returns = compute_returns(&episode, self.cfg.gamma)?;
        if self.policy.cfg.actor_critic_weight > 0.0 {
            self.policy.actor_critic_update(&returns)?;
        }
        self.memory.push(returns);

        let edited = edit_episode(
            &episode,
            self.cfg.edit_mode,
            &self.inverse,
            &self.env,
            &self.cfg.edit,
            &mut self.rng,
        )?;
        let edited_len = edited.len();
        self.goal_memory.push(edited.into_all());

        let exec = self.cfg.exec;
        let mut policy_loss = 0.0;
        for _ in 0..self.cfg.policy_updates {
            let batch = self.memory.sample(self.cfg.batch)?;
            policy_loss += self.policy.sil_update(&batch, exec)?.loss;
        }
        if self.cfg.policy_updates > 0 {
            policy_loss /= self.cfg.policy_updates as f64;
        }

        let mut subgoal_loss = 0.0;
        if !self.goal_memory.is_empty() && self.cfg.subgoal_updates > 0 {
            if self.cfg.policy_learns_subgoals {
                let dim = self.env.state_dim();
                for _ in 0..self.cfg.subgoal_updates {
                    let batch = self.goal_memory.sample(self.cfg.batch)?;
                    let stripped: Vec<Stripped> = batch.into_iter().map(|tr| Stripped { tr, dim }).collect();
                    let refs: Vec<&Stripped> = stripped.iter().collect();
                    subgoal_loss += self.policy.sil_update(&refs, exec)?.loss;
                }
                subgoal_loss /= self.cfg.subgoal_updates as f64;
            } else if self.cfg.schedule == Schedule::Interleaved {
                let r = self
                    .subgoal
                    .train(&mut self.goal_memory, self.cfg.subgoal_updates, self.cfg.batch, exec)?;
                subgoal_loss = r.mean_loss;
            }
        }

        let last = episode.last().expect("episodes are non-empty");
        let stages_cleared = episode.iter().filter(|t| t.event == Event::Goal).count();
        let success = match self.env.kind() {
            EnvKind::Simple => last.event == Event::Goal,
            EnvKind::KeyDoor => stages_cleared == self.env.stage_count(),
        };
        let metrics = EpisodeMetrics {
            episode: self.episode,
            steps: episode.len(),
            reward: episode.iter().map(|t| t.r - t.bonus).sum(),
            success,
            stages_cleared,
            bonus_mean: episode.iter().map(|t| t.bonus).sum::<f64>() / episode.len() as f64,
            edited: edited_len,
            policy_loss,
            subgoal_loss,
            inverse_loss,
        };
        if self.cfg.tail_episodes > 0 {
            if self.tail.len() == self.cfg.tail_episodes {
                self.tail.pop_front();
            }
            self.tail.push_back(episode);
        }
        self.episode += 1;
        Ok(metrics)
    }

    /// Runs the remaining configured episodes, then the post-hoc sub-goal
    /// phase when that schedule is selected.
    pub fn run(&mut self, mut on_episode: impl FnMut(&EpisodeMetrics)) -> Result<Vec<EpisodeMetrics>> {
        let mut all = Vec::with_capacity(self.cfg.episodes.saturating_sub(self.episode));
        while self.episode < self.cfg.episodes {
            let m = self.run_episode()?;
            on_episode(&m);
            all.push(m);
        }
        self.finish()?;
        Ok(all)
    }

    /// Post-hoc sub-goal training on the accumulated memory.
    pub fn finish(&mut self) -> Result<Option<TrainReport>> {
        if self.cfg.schedule != Schedule::PostHoc || self.cfg.policy_learns_subgoals || self.goal_memory.is_empty() {
            return Ok(None);
        }
        let steps = self.cfg.posthoc_steps;
        self.subgoal
            .train(&mut self.goal_memory, steps, self.cfg.batch, self.cfg.exec)
            .map(Some)
    }

    /// Writes the three network checkpoints into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let p = dir.join("policy.json");
        let g = dir.join("subgoal.json");
        let i = dir.join("inverse.json");
        self.policy.save(&p, "policy")?;
        self.subgoal.save(&g)?;
        self.inverse.save(&i)?;
        Ok(vec![p, g, i])
    }

    /// The recorded tail episodes, oldest first.
    pub fn tail_episodes(&self) -> Vec<Vec<Transition>> {
        self.tail.iter().cloned().collect()
    }
}

/// Builds a relabeled memory from recorded episodes. Each episode is edited
/// with its own RNG stream derived from `seed`, so the result does not depend
/// on `exec`.
#[allow(clippy::too_many_arguments)]
pub fn goal_memory_from_episodes(
    episodes: &[Vec<Transition>],
    env: &Environment,
    mode: EditMode,
    inverse: &(dyn InverseDynamics + Sync),
    edit: &EditConfig,
    capacity: usize,
    seed: u64,
    exec: Exec,
) -> Result<ReplayBuffer<GoalTransition>> {
    let edited = exec.map_range(episodes.len(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        edit_episode(&episodes[i], mode, inverse, env, edit, &mut rng)
    });
    let mut buf = ReplayBuffer::new(capacity, seed)?;
    for batch in edited {
        buf.push(batch?.into_all());
    }
    Ok(buf)
}
