//! Experiment pipeline shared by the command line and the acceptance suite:
//! policy training, post-hoc sub-goal agents built from the recorded tail,
//! and the ablation comparisons.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::editing::EditMode;
use crate::error::{Error, Result};
use crate::eval::{corpus_heading, reach_probe, Heading, ProbeConfig};
use crate::replay::Transition;
use crate::scenario::{compare_shaping, PolicyPair, Scenario, ShapingComparison};
use crate::subgoal::{Schedule, SubgoalAgent, TrainReport};
use crate::trainer::{goal_memory_from_episodes, EpisodeMetrics, RunConfig, Trainer};

/// A finished policy-training run.
pub struct PolicyRun {
    pub trainer: Trainer,
    pub metrics: Vec<EpisodeMetrics>,
}

impl PolicyRun {
    pub fn train(cfg: RunConfig, on_episode: impl FnMut(&EpisodeMetrics)) -> Result<Self> {
        let mut trainer = Trainer::new(cfg)?;
        let metrics = trainer.run(on_episode)?;
        Ok(PolicyRun { trainer, metrics })
    }

    /// Success rate over the `window` episodes ending at episode `end`
    /// (exclusive), clamped to what was run.
    pub fn success_rate(&self, end: usize, window: usize) -> f64 {
        success_rate(&self.metrics, end, window)
    }

    pub fn tail(&self) -> Vec<Vec<Transition>> {
        self.trainer.tail_episodes()
    }

    pub fn heading(&self) -> Heading {
        corpus_heading(&self.tail())
    }

    /// A sub-goal agent trained after the fact on the relabeled tail.
    pub fn posthoc(&self, mode: EditMode, shaping: bool, seed: u64) -> Result<(SubgoalAgent, TrainReport)> {
        let tail = self.tail();
        posthoc_agent(&self.trainer, &tail, mode, shaping, seed)
    }
}

pub fn success_rate(metrics: &[EpisodeMetrics], end: usize, window: usize) -> f64 {
    let end = end.min(metrics.len());
    let start = end.saturating_sub(window);
    if end == start {
        return 0.0;
    }
    metrics[start..end].iter().filter(|m| m.success).count() as f64 / (end - start) as f64
}

/// Relabels `episodes` with the trainer's inverse module and trains a
/// fresh sub-goal agent on them for `posthoc_steps`.
pub fn posthoc_agent(
    trainer: &Trainer,
    episodes: &[Vec<Transition>],
    mode: EditMode,
    shaping: bool,
    seed: u64,
) -> Result<(SubgoalAgent, TrainReport)> {
    let cfg = &trainer.cfg;
    let edit = crate::editing::EditConfig {
        shaping,
        ..cfg.edit.clone()
    };
    let mut ds = goal_memory_from_episodes(
        episodes,
        &trainer.env,
        mode,
        &trainer.inverse,
        &edit,
        cfg.goal_capacity,
        seed,
        cfg.exec,
    )?;
    if ds.is_empty() {
        return Err(Error::state("relabeled memory is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agent = SubgoalAgent::new(&trainer.env, cfg.subgoal.clone(), Schedule::PostHoc, &mut rng)?;
    let report = agent.train(&mut ds, cfg.posthoc_steps, cfg.batch, cfg.exec)?;
    Ok((agent, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    /// Net heading of the policy's recorded tail.
    pub heading: Heading,
    pub bidirectional_all: f64,
    pub bidirectional_opposite: f64,
    pub forward_all: f64,
    pub forward_opposite: f64,
    /// Bidirectional minus forward-only on opposite goals, in points.
    pub gap_pp: f64,
}

/// Forward-only versus bidirectional editing on the same tail, probed on
/// goals lying against the corpus heading.
pub fn direction_ablation(run: &PolicyRun, probe: &ProbeConfig, seed: u64) -> Result<DirectionReport> {
    let heading = run.heading();
    let opposite = heading.opposite();
    if opposite == (Heading { dx: 0, dy: 0 }) {
        return Err(Error::state("recorded tail has no net heading"));
    }
    let env = &run.trainer.env;
    let mut rates = Vec::new();
    for mode in [EditMode::Bidirectional, EditMode::ForwardOnly] {
        let (agent, _) = run.posthoc(mode, run.trainer.cfg.edit.shaping, seed)?;
        let all = reach_probe(env, &agent, probe, &|_, _| true)?;
        let opp = reach_probe(env, &agent, probe, &|s, g| opposite.contains(s, g))?;
        rates.push((all.rate, opp.rate));
    }
    Ok(DirectionReport {
        heading,
        bidirectional_all: rates[0].0,
        bidirectional_opposite: rates[0].1,
        forward_all: rates[1].0,
        forward_opposite: rates[1].1,
        gap_pp: 100.0 * (rates[0].1 - rates[1].1),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContaminationReport {
    pub episodes: usize,
    pub window: usize,
    pub clean_success: f64,
    pub contaminated_success: f64,
    /// Clean minus contaminated, in points.
    pub gap_pp: f64,
}

/// Trains a goal-blind policy that also imitates the relabeled memory and
/// compares its final-goal success to `clean` over the same episode window.
pub fn contamination(clean: &PolicyRun, episodes: usize, window: usize) -> Result<ContaminationReport> {
    let cfg = RunConfig {
        episodes,
        policy_learns_subgoals: true,
        edit_mode: EditMode::Bidirectional,
        ..clean.trainer.cfg.clone()
    };
    let run = PolicyRun::train(cfg, |_| {})?;
    let clean_success = clean.success_rate(episodes, window);
    let contaminated_success = run.success_rate(episodes, window);
    Ok(ContaminationReport {
        episodes,
        window,
        clean_success,
        contaminated_success,
        gap_pp: 100.0 * (clean_success - contaminated_success),
    })
}

/// Shaped and unshaped post-hoc agents from each run's tail, compared on a
/// scenario suite.
pub fn shaping_ablation(runs: &[PolicyRun], suite: &[Scenario], seed: u64) -> Result<ShapingComparison> {
    let first = runs.first().ok_or_else(|| Error::usage("shaping ablation needs at least one run"))?;
    let mut agents = Vec::with_capacity(runs.len());
    for run in runs {
        let (shaped, _) = run.posthoc(EditMode::Bidirectional, true, seed)?;
        let (unshaped, _) = run.posthoc(EditMode::Bidirectional, false, seed)?;
        agents.push((shaped, unshaped));
    }
    let pairs: Vec<PolicyPair> = agents.iter().map(|(s, u)| (s as _, u as _)).collect();
    compare_shaping(&pairs, &first.trainer.env, suite, true, first.trainer.cfg.exec)
}
