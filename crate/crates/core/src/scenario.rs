//! Waypoint missions: nearest-first dispatch of user sub-goals with
//! per-goal budgets, round trips, key-door stage ordering, and export of
//! traces, visit heatmaps and step tables.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Action, EnvKind, EnvState, Environment, Event, GridLayout, GridPos, StepOutcome};
use crate::parallel::Exec;
use crate::subgoal::GoalPolicy;

/// Floor of the default per-goal budget.
pub const MIN_GOAL_BUDGET: usize = 50;
/// Default per-goal budget is this multiple of the BFS distance at dispatch.
pub const BUDGET_PER_CELL: usize = 4;

fn default_layout() -> String {
    "simple".to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// `"simple"`, `"key-door"`, or a layout file path.
    #[serde(default = "default_layout")]
    pub layout: String,
    pub start: GridPos,
    #[serde(default)]
    pub subgoals: Vec<GridPos>,
    /// Defaults to the layout target; in the key-door domain it can only be
    /// the last door.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_target: Option<GridPos>,
    /// Key-door only: user waypoints per stage, pursued before key and door.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stage_subgoals: Vec<Vec<GridPos>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_subgoal_budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_horizon: Option<usize>,
}

impl Scenario {
    pub fn new(name: impl Into<String>, start: GridPos, subgoals: Vec<GridPos>, final_target: GridPos) -> Self {
        Scenario {
            name: name.into(),
            layout: default_layout(),
            start,
            subgoals,
            final_target: Some(final_target),
            stage_subgoals: Vec::new(),
            per_subgoal_budget: None,
            total_horizon: None,
        }
    }

    pub fn environment(&self) -> Result<Environment> {
        Environment::resolve(&self.layout)
    }

    pub fn horizon(&self, env: &Environment) -> usize {
        self.total_horizon.unwrap_or(env.horizon())
    }

    pub fn validate(&self, env: &Environment) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::config("name", "must not be empty"));
        }
        if self.total_horizon == Some(0) {
            return Err(Error::config("total_horizon", "must be positive"));
        }
        if self.per_subgoal_budget == Some(0) {
            return Err(Error::config("per_subgoal_budget", "must be positive"));
        }
        let first = env.layout(1);
        let check = |field: String, layout: &GridLayout, p: GridPos| {
            if layout.is_free(p) {
                Ok(())
            } else {
                Err(Error::config(field, format!("{p} is out of bounds or a wall")))
            }
        };
        check("start".into(), first, self.start)?;
        match env.kind() {
            EnvKind::Simple => {
                for (i, g) in self.subgoals.iter().enumerate() {
                    check(format!("subgoals[{i}]"), first, *g)?;
                }
                if let Some(f) = self.final_target {
                    check("final_target".into(), first, f)?;
                }
                if !self.stage_subgoals.is_empty() {
                    return Err(Error::config("stage_subgoals", "only valid in the key-door domain"));
                }
            }
            EnvKind::KeyDoor => {
                if !self.subgoals.is_empty() {
                    return Err(Error::config("subgoals", "key-door scenarios use stage_subgoals"));
                }
                let last = env.layout(env.stage_count()).target();
                if self.final_target.is_some_and(|f| f != last) {
                    return Err(Error::config("final_target", format!("must be the last door {last}")));
                }
                if self.stage_subgoals.len() > env.stage_count() {
                    return Err(Error::config(
                        "stage_subgoals",
                        format!("{} stages given, domain has {}", self.stage_subgoals.len(), env.stage_count()),
                    ));
                }
                for (s, goals) in self.stage_subgoals.iter().enumerate() {
                    for (i, g) in goals.iter().enumerate() {
                        check(format!("stage_subgoals[{s}][{i}]"), env.layout(s + 1), *g)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// The dispatch plan this scenario hands to a [`Navigator`].
    pub fn plan(&self, env: &Environment) -> NavPlan {
        let horizon = self.horizon(env);
        match env.kind() {
            EnvKind::Simple => NavPlan {
                waypoints: vec![self.subgoals.clone()],
                final_target: Some(self.final_target.unwrap_or(env.layout(1).target())),
                stage_tiers: false,
                per_subgoal_budget: self.per_subgoal_budget,
                horizon,
            },
            EnvKind::KeyDoor => NavPlan {
                waypoints: self.stage_subgoals.clone(),
                final_target: None,
                stage_tiers: true,
                per_subgoal_budget: self.per_subgoal_budget,
                horizon,
            },
        }
    }
}

/// The environment a mission runs in: the simple grid's target stops being
/// terminal (the mission decides what counts as done) and the horizon is the
/// mission's.
pub fn mission_env(env: &Environment, horizon: usize) -> Environment {
    let env = env.clone().with_horizon(horizon);
    match env.kind() {
        EnvKind::Simple => env.without_terminal_target(),
        EnvKind::KeyDoor => env,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GoalKind {
    Waypoint,
    Bonus,
    Door,
    Final,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum GoalStatus {
    Reached { step: usize },
    TimedOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoalOutcome {
    pub goal: GridPos,
    pub kind: GoalKind,
    pub stage: usize,
    /// `None` for goals that were never pursued.
    pub dispatched_at: Option<usize>,
    #[serde(flatten)]
    pub status: GoalStatus,
    /// Steps spent pursuing this goal.
    pub span: usize,
}

impl GoalOutcome {
    pub fn reached(&self) -> bool {
        matches!(self.status, GoalStatus::Reached { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dispatch {
    pub step: usize,
    pub goal: GridPos,
    pub kind: GoalKind,
    pub stage: usize,
    pub budget: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NavPlan {
    /// User waypoints per stage (index 0 is stage 1).
    pub waypoints: Vec<Vec<GridPos>>,
    /// Pursued with the remaining horizon once the waypoints run out.
    pub final_target: Option<GridPos>,
    /// Key-door ordering: after a stage's waypoints, alternate key and door
    /// until the stage is cleared.
    pub stage_tiers: bool,
    pub per_subgoal_budget: Option<usize>,
    pub horizon: usize,
}

#[derive(Debug, Clone, Copy)]
struct Pursuit {
    goal: GridPos,
    kind: GoalKind,
    stage: usize,
    dispatched_at: usize,
    budget: usize,
    span: usize,
}

/// Nearest-first goal dispatcher shared by batch scenarios and live
/// sessions.
#[derive(Debug, Clone)]
pub struct Navigator {
    plan: NavPlan,
    queue: Vec<GridPos>,
    loaded_stage: usize,
    final_pending: Option<GridPos>,
    current: Option<Pursuit>,
    halted: bool,
    dispatches: Vec<Dispatch>,
    outcomes: Vec<GoalOutcome>,
}

impl Navigator {
    pub fn new(mut plan: NavPlan) -> Self {
        let queue = if plan.waypoints.is_empty() {
            Vec::new()
        } else {
            std::mem::take(&mut plan.waypoints[0])
        };
        Navigator {
            final_pending: plan.final_target,
            plan,
            queue,
            loaded_stage: 1,
            current: None,
            halted: false,
            dispatches: Vec::new(),
            outcomes: Vec::new(),
        }
    }

    /// Queues a waypoint in the current stage.
    pub fn push(&mut self, env: &Environment, state: &EnvState, goal: GridPos) -> Result<()> {
        if !env.layout(state.stage).is_free(goal) {
            return Err(Error::usage(format!("goal {goal} is out of bounds or a wall")));
        }
        self.queue.push(goal);
        Ok(())
    }

    /// Drops queued waypoints and abandons the current pursuit.
    pub fn clear(&mut self) {
        self.queue.clear();
        self.abandon();
    }

    pub fn current_goal(&self) -> Option<GridPos> {
        self.current.map(|p| p.goal)
    }

    /// True while a goal is being pursued or anything is left to dispatch.
    pub fn has_work(&self) -> bool {
        self.current.is_some()
            || !self.queue.is_empty()
            || self.final_pending.is_some()
            || (self.plan.stage_tiers && !self.halted)
    }

    pub fn queued(&self) -> &[GridPos] {
        &self.queue
    }

    pub fn dispatches(&self) -> &[Dispatch] {
        &self.dispatches
    }

    pub fn outcomes(&self) -> &[GoalOutcome] {
        &self.outcomes
    }

    fn close(&mut self, status: GoalStatus) {
        if let Some(p) = self.current.take() {
            self.outcomes.push(GoalOutcome {
                goal: p.goal,
                kind: p.kind,
                stage: p.stage,
                dispatched_at: Some(p.dispatched_at),
                status,
                span: p.span,
            });
        }
    }

    fn abandon(&mut self) {
        self.close(GoalStatus::TimedOut);
    }

    fn skip(&mut self, goal: GridPos, kind: GoalKind, stage: usize) {
        self.outcomes.push(GoalOutcome {
            goal,
            kind,
            stage,
            dispatched_at: None,
            status: GoalStatus::TimedOut,
            span: 0,
        });
    }

    fn load_stage(&mut self, stage: usize) {
        if stage == self.loaded_stage {
            return;
        }
        for g in std::mem::take(&mut self.queue) {
            self.skip(g, GoalKind::Waypoint, self.loaded_stage);
        }
        self.queue = self
            .plan
            .waypoints
            .get_mut(stage - 1)
            .map(std::mem::take)
            .unwrap_or_default();
        self.loaded_stage = stage;
    }

    /// The goal to pursue from `state`, dispatching a new one when needed.
    /// Goals already satisfied or unreachable are resolved on the spot.
    /// `None` means idle (nothing queued) or finished.
    pub fn dispatch(&mut self, env: &Environment, state: &EnvState) -> Option<GridPos> {
        if let Some(p) = self.current {
            return Some(p.goal);
        }
        if self.halted || state.done {
            return None;
        }
        self.load_stage(state.stage);
        let layout = env.layout(state.stage);
        let step = state.t;
        let mut tier_attempts = 0;
        loop {
            let (goal, kind) = if !self.queue.is_empty() {
                let unreachable: Vec<GridPos> = self
                    .queue
                    .iter()
                    .copied()
                    .filter(|g| layout.distance(state.pos, *g).is_none())
                    .collect();
                for g in unreachable {
                    log::warn!("waypoint {g} is unreachable from {}; marking it timed out", state.pos);
                    self.skip(g, GoalKind::Waypoint, state.stage);
                    self.queue.retain(|q| *q != g);
                }
                if self.queue.is_empty() {
                    continue;
                }
                let (idx, _) = self
                    .queue
                    .iter()
                    .enumerate()
                    .min_by_key(|(i, g)| (layout.distance(state.pos, **g), *i))
                    .expect("queue is non-empty");
                (self.queue.remove(idx), GoalKind::Waypoint)
            } else if self.plan.stage_tiers {
                tier_attempts += 1;
                if tier_attempts > 2 {
                    self.halted = true;
                    return None;
                }
                match (state.has_bonus, layout.bonus()) {
                    (false, Some(b)) => (b, GoalKind::Bonus),
                    _ => (layout.target(), GoalKind::Door),
                }
            } else {
                (self.final_pending.take()?, GoalKind::Final)
            };

            if goal == state.pos {
                self.dispatches.push(Dispatch { step, goal, kind, stage: state.stage, budget: 0 });
                self.outcomes.push(GoalOutcome {
                    goal,
                    kind,
                    stage: state.stage,
                    dispatched_at: Some(step),
                    status: GoalStatus::Reached { step },
                    span: 0,
                });
                continue;
            }
            let Some(d) = layout.distance(state.pos, goal) else {
                log::warn!("{kind:?} goal {goal} is unreachable from {}; marking it timed out", state.pos);
                self.skip(goal, kind, state.stage);
                if kind != GoalKind::Waypoint {
                    self.halted = true;
                    return None;
                }
                continue;
            };
            let remaining = self.plan.horizon.saturating_sub(step).max(1);
            let budget = match kind {
                GoalKind::Final => remaining,
                _ => self
                    .plan
                    .per_subgoal_budget
                    .unwrap_or((BUDGET_PER_CELL * d as usize).max(MIN_GOAL_BUDGET)),
            };
            self.dispatches.push(Dispatch { step, goal, kind, stage: state.stage, budget });
            self.current = Some(Pursuit {
                goal,
                kind,
                stage: state.stage,
                dispatched_at: step,
                budget,
                span: 0,
            });
            return Some(goal);
        }
    }

    /// Accounts one environment step against the current pursuit.
    pub fn observe(&mut self, before: &EnvState, out: &StepOutcome) {
        let Some(p) = self.current.as_mut() else {
            return;
        };
        p.span += 1;
        if out.entered == p.goal && before.stage == p.stage {
            self.close(GoalStatus::Reached { step: out.next.t });
        } else if out.next.stage != p.stage || p.span >= p.budget {
            self.abandon();
        }
    }

    /// Closes the run: the current pursuit and everything still pending
    /// time out.
    pub fn finish(mut self) -> (Vec<Dispatch>, Vec<GoalOutcome>) {
        self.abandon();
        let stage = self.loaded_stage;
        for g in std::mem::take(&mut self.queue) {
            self.skip(g, GoalKind::Waypoint, stage);
        }
        let later: Vec<(usize, Vec<GridPos>)> = self
            .plan
            .waypoints
            .iter_mut()
            .enumerate()
            .skip(stage)
            .map(|(i, w)| (i + 1, std::mem::take(w)))
            .collect();
        for (s, goals) in later {
            for g in goals {
                self.skip(g, GoalKind::Waypoint, s);
            }
        }
        if let Some(f) = self.final_pending.take() {
            self.skip(f, GoalKind::Final, stage);
        }
        (self.dispatches, self.outcomes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TracePoint {
    pub x: i32,
    pub y: i32,
    pub stage: usize,
}

impl TracePoint {
    pub fn of(state: &EnvState) -> Self {
        TracePoint {
            x: state.pos.x,
            y: state.pos.y,
            stage: state.stage,
        }
    }

    pub fn pos(&self) -> GridPos {
        GridPos::new(self.x, self.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub name: String,
    pub seed: u64,
    pub success: bool,
    pub total_steps: usize,
    pub stages_cleared: usize,
    pub width: i32,
    pub height: i32,
    pub reached: Vec<GoalOutcome>,
    pub dispatches: Vec<Dispatch>,
    pub trace: Vec<TracePoint>,
    pub actions: Vec<Action>,
    /// Per stage, row-major `width * height` visit counts.
    pub visits: Vec<Vec<u32>>,
}

impl ScenarioResult {
    pub fn waypoints_reached(&self) -> usize {
        self.reached
            .iter()
            .filter(|o| o.kind == GoalKind::Waypoint && o.reached())
            .count()
    }

    pub fn spans_total(&self) -> usize {
        self.reached.iter().map(|o| o.span).sum()
    }
}

/// Drives `policy` through one mission.
pub fn run_scenario(
    policy: &dyn GoalPolicy,
    env: &Environment,
    sc: &Scenario,
    seed: u64,
    greedy: bool,
) -> Result<ScenarioResult> {
    sc.validate(env)?;
    let env = mission_env(env, sc.horizon(env));
    let mut state = env.reset_at(sc.start)?;
    let mut nav = Navigator::new(sc.plan(&env));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (env.layout(1).width(), env.layout(1).height());
    let mut visits = vec![vec![0u32; (w * h) as usize]; env.stage_count()];
    let mut trace = vec![TracePoint::of(&state)];
    let mut actions = Vec::new();
    let mut stages_cleared = 0;
    let mut visit = |s: &EnvState| visits[s.stage - 1][(s.pos.y * w + s.pos.x) as usize] += 1;
    visit(&state);
    while !state.done {
        let Some(goal) = nav.dispatch(&env, &state) else {
            break;
        };
        let a = policy.goal_action(&env, &state, goal, greedy, &mut rng)?;
        let out = env.step(&state, a)?;
        nav.observe(&state, &out);
        if out.event == Event::Goal {
            stages_cleared += 1;
        }
        state = out.next;
        visit(&state);
        trace.push(TracePoint::of(&state));
        actions.push(a);
    }
    let (dispatches, reached) = nav.finish();
    let success = match env.kind() {
        EnvKind::Simple => reached.iter().any(|o| o.kind == GoalKind::Final && o.reached()),
        EnvKind::KeyDoor => stages_cleared == env.stage_count(),
    };
    Ok(ScenarioResult {
        name: sc.name.clone(),
        seed,
        success,
        total_steps: state.t,
        stages_cleared,
        width: w,
        height: h,
        reached,
        dispatches,
        trace,
        actions,
        visits,
    })
}

fn run_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs a suite with per-scenario seeds derived from `seed` and the
/// scenario's position; results come back sorted by name.
pub fn run_suite(
    policy: &(dyn GoalPolicy + Sync),
    env: &Environment,
    suite: &[Scenario],
    seed: u64,
    greedy: bool,
    exec: Exec,
) -> Result<Vec<ScenarioResult>> {
    let names: BTreeSet<&str> = suite.iter().map(|s| s.name.as_str()).collect();
    if names.len() != suite.len() {
        return Err(Error::usage("scenario names in a suite must be unique"));
    }
    let mut results = exec
        .map_range(suite.len(), |i| run_scenario(policy, env, &suite[i], run_seed(seed, i), greedy))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    results.sort_by(|a, b| a.name.cmp(&b.name));
    Ok(results)
}

/// Replays a recorded trace: at step `t` it picks an action whose outcome
/// matches trace point `t + 1`.
#[derive(Debug, Clone)]
pub struct TraceReplay {
    pub trace: Vec<TracePoint>,
}

impl GoalPolicy for TraceReplay {
    fn goal_action(
        &self,
        env: &Environment,
        state: &EnvState,
        _goal: GridPos,
        _greedy: bool,
        _rng: &mut dyn RngCore,
    ) -> Result<Action> {
        let want = self
            .trace
            .get(state.t + 1)
            .ok_or_else(|| Error::state(format!("trace ends before step {}", state.t + 1)))?;
        Action::ALL
            .into_iter()
            .find(|a| {
                env.step(state, *a)
                    .is_ok_and(|o| o.next.pos == want.pos() && o.next.stage == want.stage)
            })
            .ok_or_else(|| Error::state(format!("no action reproduces trace step {}", state.t + 1)))
    }
}

/// Shortest-path reference: steps along a BFS-optimal route, breaking ties
/// by action order.
#[derive(Debug, Clone, Copy, Default)]
pub struct BfsOracle;

impl GoalPolicy for BfsOracle {
    fn goal_action(
        &self,
        env: &Environment,
        state: &EnvState,
        goal: GridPos,
        _greedy: bool,
        _rng: &mut dyn RngCore,
    ) -> Result<Action> {
        let layout = env.layout(state.stage);
        let d = layout
            .distance(state.pos, goal)
            .ok_or(Error::Unreachable { from: state.pos, to: goal })?;
        Ok(Action::ALL
            .into_iter()
            .find(|a| d > 0 && layout.distance(state.pos.offset(*a), goal) == Some(d - 1))
            .unwrap_or(Action::Up))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapingRow {
    pub scenario: String,
    pub shaped_mean_steps: f64,
    pub unshaped_mean_steps: f64,
    pub shaped_success: f64,
    pub unshaped_success: f64,
    /// Unshaped minus shaped.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapingComparison {
    pub seeds: usize,
    pub rows: Vec<ShapingRow>,
    pub shaped_mean_steps: f64,
    pub unshaped_mean_steps: f64,
    pub shaped_success: f64,
    pub unshaped_success: f64,
    /// `(unshaped - shaped) / unshaped`.
    pub relative_reduction: f64,
}

impl ShapingComparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,shaped_mean_steps,unshaped_mean_steps,delta,shaped_success,unshaped_success\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.2},{:.2},{:.2},{:.3},{:.3}",
                r.scenario, r.shaped_mean_steps, r.unshaped_mean_steps, r.delta, r.shaped_success, r.unshaped_success
            );
        }
        let _ = writeln!(
            out,
            "mean,{:.2},{:.2},{:.2},{:.3},{:.3}",
            self.shaped_mean_steps,
            self.unshaped_mean_steps,
            self.unshaped_mean_steps - self.shaped_mean_steps,
            self.shaped_success,
            self.unshaped_success
        );
        out
    }
}

pub type PolicyPair<'a> = (&'a (dyn GoalPolicy + Sync), &'a (dyn GoalPolicy + Sync));

/// Step counts with and without shaping, one `(shaped, unshaped)` pair per
/// training seed, run `i` of each pair under suite seed `i`.
pub fn compare_shaping(
    pairs: &[PolicyPair<'_>],
    env: &Environment,
    suite: &[Scenario],
    greedy: bool,
    exec: Exec,
) -> Result<ShapingComparison> {
    if suite.is_empty() {
        return Err(Error::usage("shaping comparison needs a non-empty suite"));
    }
    if pairs.is_empty() {
        return Err(Error::usage("shaping comparison needs at least one agent pair"));
    }
    let mut shaped = Vec::with_capacity(pairs.len());
    let mut unshaped = Vec::with_capacity(pairs.len());
    for (i, (s, u)) in pairs.iter().enumerate() {
        shaped.push(run_suite(*s, env, suite, i as u64, greedy, exec)?);
        unshaped.push(run_suite(*u, env, suite, i as u64, greedy, exec)?);
    }
    let n = pairs.len() as f64;
    let rows: Vec<ShapingRow> = (0..suite.len())
        .map(|j| {
            let mean = |runs: &[Vec<ScenarioResult>], f: &dyn Fn(&ScenarioResult) -> f64| {
                runs.iter().map(|r| f(&r[j])).sum::<f64>() / n
            };
            let steps = |r: &ScenarioResult| r.total_steps as f64;
            let succ = |r: &ScenarioResult| if r.success { 1.0 } else { 0.0 };
            let (sm, um) = (mean(&shaped, &steps), mean(&unshaped, &steps));
            ShapingRow {
                scenario: shaped[0][j].name.clone(),
                shaped_mean_steps: sm,
                unshaped_mean_steps: um,
                shaped_success: mean(&shaped, &succ),
                unshaped_success: mean(&unshaped, &succ),
                delta: um - sm,
            }
        })
        .collect();
    let m = rows.len() as f64;
    let avg = |f: fn(&ShapingRow) -> f64| rows.iter().map(f).sum::<f64>() / m;
    let shaped_mean_steps = avg(|r| r.shaped_mean_steps);
    let unshaped_mean_steps = avg(|r| r.unshaped_mean_steps);
    let relative_reduction = if unshaped_mean_steps > 0.0 {
        (unshaped_mean_steps - shaped_mean_steps) / unshaped_mean_steps
    } else {
        0.0
    };
    Ok(ShapingComparison {
        seeds: pairs.len(),
        shaped_success: avg(|r| r.shaped_success),
        unshaped_success: avg(|r| r.unshaped_success),
        rows,
        shaped_mean_steps,
        unshaped_mean_steps,
        relative_reduction,
    })
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[derive(Serialize)]
struct TraceFile<'a> {
    name: &'a str,
    seed: u64,
    width: i32,
    height: i32,
    success: bool,
    total_steps: usize,
    trace: &'a [TracePoint],
    reached: &'a [GoalOutcome],
    dispatches: &'a [Dispatch],
}

/// Visit counts as CSV: one row per `(stage, y)`, one column per `x`.
pub fn heatmap_csv(r: &ScenarioResult) -> String {
    visits_csv(r.width, r.height, &r.visits)
}

/// Row-major per-stage grids in the heatmap CSV layout.
pub fn visits_csv<T: std::fmt::Display>(width: i32, height: i32, grids: &[Vec<T>]) -> String {
    let mut out = String::from("stage,y");
    for x in 0..width {
        let _ = write!(out, ",x{x}");
    }
    out.push('\n');
    for (s, grid) in grids.iter().enumerate() {
        for y in 0..height {
            let _ = write!(out, "{},{y}", s + 1);
            for x in 0..width {
                let _ = write!(out, ",{}", grid[(y * width + x) as usize]);
            }
            out.push('\n');
        }
    }
    out
}

/// Parses the heatmap CSV layout back into `(width, height, grids)`.
pub fn parse_visits_csv(text: &str) -> Result<(i32, i32, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Format("empty heatmap".into()))?;
    let width = header.split(',').count().saturating_sub(2) as i32;
    if width == 0 || !header.starts_with("stage,y") {
        return Err(Error::Format("heatmap header must be stage,y,x0,...".into()));
    }
    let mut grids: Vec<Vec<f64>> = Vec::new();
    let mut height = 0;
    for (n, line) in lines.enumerate() {
        let bad = || Error::Format(format!("heatmap row {}: malformed", n + 2));
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width as usize + 2 {
            return Err(bad());
        }
        let stage: usize = cells[0].parse().map_err(|_| bad())?;
        let y: i32 = cells[1].parse().map_err(|_| bad())?;
        if stage == 0 || stage > grids.len() + 1 {
            return Err(bad());
        }
        if stage > grids.len() {
            grids.push(Vec::new());
        }
        if y as usize * width as usize != grids[stage - 1].len() {
            return Err(bad());
        }
        for v in &cells[2..] {
            grids[stage - 1].push(v.parse().map_err(|_| bad())?);
        }
        height = height.max(y + 1);
    }
    if grids.is_empty() || grids.iter().any(|g| g.len() != (width * height) as usize) {
        return Err(Error::Format("heatmap grids are ragged".into()));
    }
    Ok((width, height, grids))
}

pub fn summary_csv(results: &[ScenarioResult]) -> String {
    let mut out = String::from("name,seed,success,total_steps,stages_cleared,waypoints,waypoints_reached\n");
    for r in results {
        let waypoints = r.reached.iter().filter(|o| o.kind == GoalKind::Waypoint).count();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.name,
            r.seed,
            r.success,
            r.total_steps,
            r.stages_cleared,
            waypoints,
            r.waypoints_reached()
        );
    }
    out
}

/// Writes `<name>.s<seed>.trace.json` and `<name>.s<seed>.heatmap.csv` per
/// result, plus `summary.csv` and `results.jsonl`. Returns the paths written.
pub fn export_artifacts(results: &[ScenarioResult], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut jsonl = String::new();
    for r in results {
        let stem = format!("{}.s{}", slug(&r.name), r.seed);
        let trace = TraceFile {
            name: &r.name,
            seed: r.seed,
            width: r.width,
            height: r.height,
            success: r.success,
            total_steps: r.total_steps,
            trace: &r.trace,
            reached: &r.reached,
            dispatches: &r.dispatches,
        };
        let path = dir.join(format!("{stem}.trace.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&trace)? + "\n")?;
        written.push(path);
        let path = dir.join(format!("{stem}.heatmap.csv"));
        std::fs::write(&path, heatmap_csv(r))?;
        written.push(path);
        jsonl.push_str(&serde_json::to_string(r)?);
        jsonl.push('\n');
    }
    let path = dir.join("summary.csv");
    std::fs::write(&path, summary_csv(results))?;
    written.push(path);
    let path = dir.join("results.jsonl");
    std::fs::write(&path, jsonl)?;
    written.push(path);
    Ok(written)
}

pub fn load_suite(path: &Path) -> Result<Vec<Scenario>> {
    let text = std::fs::read_to_string(path)?;
    parse_suite(&text)
}

/// A suite file holds either one scenario object or an array of them.
pub fn parse_suite(text: &str) -> Result<Vec<Scenario>> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    let items = match value {
        serde_json::Value::Array(items) => items,
        other => vec![other],
    };
    items
        .into_iter()
        .enumerate()
        .map(|(i, v)| serde_json::from_value(v).map_err(|e| Error::config(format!("scenarios[{i}]"), e.to_string())))
        .collect()
}

/// Seed of the shipped simple-grid suites.
pub const SUITE_SEED: u64 = 20;

fn nearest_free(layout: &GridLayout, p: GridPos) -> GridPos {
    layout
        .free_cells()
        .min_by_key(|c| (c.manhattan(p), *c))
        .expect("layouts have free cells")
}

fn random_free<R: Rng>(layout: &GridLayout, from: GridPos, rng: &mut R) -> GridPos {
    let cells = layout.reachable_from(from);
    cells[rng.gen_range(0..cells.len())]
}

fn lerp(a: GridPos, b: GridPos, f: f64) -> GridPos {
    GridPos::new(
        (a.x as f64 + f * (b.x - a.x) as f64).round() as i32,
        (a.y as f64 + f * (b.y - a.y) as f64).round() as i32,
    )
}

/// A loop away from the layout start toward its target and back: four
/// waypoints on a square of side `side`, final target the start.
pub fn round_trip(env: &Environment, side: i32) -> Scenario {
    let layout = env.layout(1);
    let s = layout.start();
    let t = layout.target();
    let dx = if t.x < s.x { -1 } else { 1 };
    let dy = if t.y < s.y { -1 } else { 1 };
    let clamp = |p: GridPos| {
        nearest_free(
            layout,
            GridPos::new(p.x.clamp(0, layout.width() - 1), p.y.clamp(0, layout.height() - 1)),
        )
    };
    let half = side / 2;
    let waypoints = vec![
        clamp(GridPos::new(s.x, s.y + dy * half)),
        clamp(GridPos::new(s.x, s.y + dy * side)),
        clamp(GridPos::new(s.x + dx * side, s.y + dy * side)),
        clamp(GridPos::new(s.x + dx * side, s.y)),
    ];
    Scenario::new("round-trip", s, waypoints, s)
}

/// Simple-grid missions cycling through corner-to-corner runs, reversed
/// start and target, round trips, and random tours.
pub fn generate_suite(env: &Environment, count: usize, seed: u64) -> Result<Vec<Scenario>> {
    if env.kind() != EnvKind::Simple {
        return Err(Error::usage("suite generation targets the simple grid"));
    }
    let layout = env.layout(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (layout.width(), layout.height());
    let corners = [
        GridPos::new(0, 0),
        GridPos::new(w - 1, 0),
        GridPos::new(w - 1, h - 1),
        GridPos::new(0, h - 1),
    ];
    let mut suite = Vec::with_capacity(count);
    for i in 0..count {
        let sc = match i % 4 {
            0 => {
                let c = rng.gen_range(0..4);
                let start = nearest_free(layout, corners[c]);
                let target = nearest_free(layout, corners[(c + 2) % 4]);
                let n = rng.gen_range(2..=4);
                let subgoals = (0..n).map(|_| random_free(layout, start, &mut rng)).collect();
                Scenario::new(format!("corner-{i:02}"), start, subgoals, target)
            }
            1 => {
                let start = layout.target();
                let n = rng.gen_range(2..=4);
                let subgoals = (0..n).map(|_| random_free(layout, start, &mut rng)).collect();
                Scenario::new(format!("reversed-{i:02}"), start, subgoals, layout.start())
            }
            2 => {
                let start = random_free(layout, layout.start(), &mut rng);
                let far = random_free(layout, start, &mut rng);
                let side = nearest_free(layout, GridPos::new(far.x, start.y));
                let subgoals = vec![
                    nearest_free(layout, lerp(start, far, 0.5)),
                    far,
                    nearest_free(layout, lerp(far, side, 0.5)),
                    side,
                ];
                Scenario::new(format!("round-trip-{i:02}"), start, subgoals, start)
            }
            _ => {
                let start = random_free(layout, layout.start(), &mut rng);
                let subgoals = (0..3).map(|_| random_free(layout, start, &mut rng)).collect();
                let target = random_free(layout, start, &mut rng);
                Scenario::new(format!("tour-{i:02}"), start, subgoals, target)
            }
        };
        suite.push(sc);
    }
    Ok(suite)
}

/// Key-door missions: two user waypoints per stage, then key and door.
pub fn generate_key_door_suite(env: &Environment, count: usize, seed: u64) -> Result<Vec<Scenario>> {
    if env.kind() != EnvKind::KeyDoor {
        return Err(Error::usage("key-door suite generation needs the key-door domain"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|i| {
            let stage_subgoals = (1..=env.stage_count())
                .map(|s| {
                    let l = env.layout(s);
                    (0..2).map(|_| random_free(l, l.start(), &mut rng)).collect()
                })
                .collect();
            Scenario {
                name: format!("key-door-{i:02}"),
                layout: "key-door".to_string(),
                start: env.layout(1).start(),
                subgoals: Vec::new(),
                final_target: None,
                stage_subgoals,
                per_subgoal_budget: None,
                total_horizon: None,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::LayoutBuilder;

    fn open(w: i32, h: i32) -> Environment {
        Environment::simple(
            LayoutBuilder::new(w, h, GridPos::new(0, 0), GridPos::new(w - 1, h - 1))
                .build()
                .unwrap(),
        )
    }

    #[test]
    fn nearest_subgoal_is_dispatched_first() {
        let env = open(20, 20);
        let sc = Scenario::new("n", GridPos::new(0, 0), vec![GridPos::new(10, 10), GridPos::new(2, 3)], GridPos::new(0, 0));
        let r = run_scenario(&BfsOracle, &env, &sc, 0, true).unwrap();
        assert_eq!(r.dispatches[0].goal, GridPos::new(2, 3));
        assert_eq!(r.dispatches[1].goal, GridPos::new(10, 10));
        assert_eq!(r.dispatches[2].kind, GoalKind::Final);
        assert!(r.success);
        assert_eq!(r.total_steps, 5 + 15 + 20);
    }

    #[test]
    fn zero_subgoals_is_plain_goal_reaching() {
        let env = open(10, 10);
        let sc = Scenario::new("plain", GridPos::new(0, 0), vec![], GridPos::new(4, 6));
        let r = run_scenario(&BfsOracle, &env, &sc, 0, true).unwrap();
        assert!(r.success);
        assert_eq!(r.total_steps, 10);
        assert_eq!(r.dispatches.len(), 1);
    }

    #[test]
    fn round_trip_requires_returning_home() {
        let env = Environment::default_simple();
        let sc = round_trip(&env, 6);
        assert!(sc.subgoals.len() >= 4);
        assert_eq!(sc.final_target, Some(sc.start));
        let r = run_scenario(&BfsOracle, &env, &sc, 0, true).unwrap();
        assert!(r.success);
        assert_eq!(r.trace.last().unwrap().pos(), sc.start);
        let order: Vec<GridPos> = r.dispatches.iter().take(4).map(|d| d.goal).collect();
        assert_eq!(order, sc.subgoals, "the loop is visited in order");
    }

    #[test]
    fn goal_at_current_position_is_reached_immediately() {
        let env = open(5, 5);
        let sc = Scenario::new("here", GridPos::new(2, 2), vec![GridPos::new(2, 2)], GridPos::new(2, 3));
        let r = run_scenario(&BfsOracle, &env, &sc, 0, true).unwrap();
        assert_eq!(r.reached[0].status, GoalStatus::Reached { step: 0 });
        assert_eq!(r.reached[0].span, 0);
        assert_eq!(r.total_steps, 1);
    }

    #[test]
    fn walled_off_waypoint_times_out_without_spending_steps() {
        let layout = LayoutBuilder::new(5, 5, GridPos::new(0, 0), GridPos::new(1, 0))
            .walls([GridPos::new(3, 4), GridPos::new(4, 3)])
            .build()
            .unwrap();
        let env = Environment::simple(layout);
        let sc = Scenario::new("walled", GridPos::new(0, 0), vec![GridPos::new(4, 4), GridPos::new(0, 2)], GridPos::new(1, 0));
        let r = run_scenario(&BfsOracle, &env, &sc, 0, true).unwrap();
        let walled = r.reached.iter().find(|o| o.goal == GridPos::new(4, 4)).unwrap();
        assert_eq!(walled.status, GoalStatus::TimedOut);
        assert_eq!(walled.dispatched_at, None);
        assert!(r.success);
        assert_eq!(r.total_steps, 2 + 3);
    }

    struct Stubborn;
    impl GoalPolicy for Stubborn {
        fn goal_action(&self, _: &Environment, _: &EnvState, _: GridPos, _: bool, _: &mut dyn RngCore) -> Result<Action> {
            Ok(Action::Up)
        }
    }

    #[test]
    fn budgets_expire_and_spans_add_up() {
        let env = open(10, 10);
        let mut sc = Scenario::new("stuck", GridPos::new(0, 9), vec![GridPos::new(9, 9), GridPos::new(5, 9)], GridPos::new(9, 0));
        sc.total_horizon = Some(200);
        let r = run_scenario(&Stubborn, &env, &sc, 0, true).unwrap();
        assert!(!r.success);
        assert_eq!(r.total_steps, 200);
        assert_eq!(r.dispatches[0].goal, GridPos::new(5, 9));
        assert_eq!(r.dispatches[0].budget, 50);
        assert_eq!(r.dispatches[1].step, 50);
        assert_eq!(r.dispatches[1].budget, 4 * 18);
        assert_eq!(r.dispatches[2].kind, GoalKind::Final);
        assert_eq!(r.dispatches[2].step, 122);
        assert_eq!(r.dispatches[2].budget, 200 - 122);
        assert_eq!(r.spans_total(), r.total_steps);
        assert_eq!(r.trace.len(), r.total_steps + 1);
    }

    #[test]
    fn explicit_budget_overrides_the_default() {
        let env = open(30, 30);
        let mut sc = Scenario::new("b", GridPos::new(0, 0), vec![GridPos::new(29, 29)], GridPos::new(0, 0));
        assert_eq!(run_scenario(&Stubborn, &env, &sc, 0, true).unwrap().dispatches[0].budget, 4 * 58);
        sc.per_subgoal_budget = Some(7);
        assert_eq!(run_scenario(&Stubborn, &env, &sc, 0, true).unwrap().dispatches[0].budget, 7);
    }

    #[test]
    fn invalid_scenarios_are_rejected() {
        let env = Environment::default_simple();
        let mut sc = Scenario::new("bad", GridPos::new(0, 0), vec![GridPos::new(20, 0)], GridPos::new(1, 1));
        assert!(matches!(sc.validate(&env), Err(Error::Config { field, .. }) if field == "subgoals[0]"));
        sc.subgoals.clear();
        sc.stage_subgoals = vec![vec![]];
        assert!(sc.validate(&env).is_err());
        let kd = Environment::default_key_door();
        let mut sc = generate_key_door_suite(&kd, 1, 0).unwrap().remove(0);
        sc.validate(&kd).unwrap();
        sc.final_target = Some(GridPos::new(0, 0));
        assert!(sc.validate(&kd).is_err());
    }

    #[test]
    fn key_door_orders_waypoints_key_then_door() {
        let env = Environment::default_key_door();
        let sc = generate_key_door_suite(&env, 1, 3).unwrap().remove(0);
        let r = run_scenario(&BfsOracle, &env, &sc, 0, true).unwrap();
        assert!(r.success);
        assert_eq!(r.stages_cleared, 4);
        for stage in 1..=4 {
            let kinds: Vec<GoalKind> = r.dispatches.iter().filter(|d| d.stage == stage).map(|d| d.kind).collect();
            assert_eq!(&kinds[..2], [GoalKind::Waypoint, GoalKind::Waypoint], "stage {stage}");
            let tail = &kinds[2..];
            // A waypoint route may already have crossed the key.
            assert!(tail == [GoalKind::Bonus, GoalKind::Door] || tail == [GoalKind::Door], "stage {stage}: {kinds:?}");
        }
        assert_eq!(r.spans_total(), r.total_steps);
    }

    #[test]
    fn door_without_key_sends_the_agent_back_for_it() {
        let env = Environment::default_key_door();
        let door = env.layout(1).target();
        let mut sc = generate_key_door_suite(&env, 1, 0).unwrap().remove(0);
        sc.stage_subgoals = vec![vec![door]];
        let r = run_scenario(&BfsOracle, &env, &sc, 0, true).unwrap();
        let first: Vec<GoalKind> = r.dispatches.iter().take(3).map(|d| d.kind).collect();
        assert_eq!(first, [GoalKind::Waypoint, GoalKind::Bonus, GoalKind::Door]);
        assert!(r.success);
    }

    #[test]
    fn replaying_a_trace_reproduces_dispatches() {
        let env = Environment::default_key_door();
        let sc = generate_key_door_suite(&env, 1, 5).unwrap().remove(0);
        let live = run_scenario(&BfsOracle, &env, &sc, 0, true).unwrap();
        let replay = TraceReplay { trace: live.trace.clone() };
        let again = run_scenario(&replay, &env, &sc, 99, false).unwrap();
        assert_eq!(again.dispatches, live.dispatches);
        assert_eq!(again.trace, live.trace);
        assert_eq!(again.reached, live.reached);
    }

    #[test]
    fn visits_conserve_trace_length() {
        let env = Environment::default_key_door();
        let sc = generate_key_door_suite(&env, 1, 1).unwrap().remove(0);
        let r = run_scenario(&BfsOracle, &env, &sc, 0, true).unwrap();
        let total: u32 = r.visits.iter().flatten().sum();
        assert_eq!(total as usize, r.trace.len());
    }

    #[test]
    fn shaping_comparison_of_identical_agents_is_neutral() {
        let env = Environment::default_simple();
        let suite = generate_suite(&env, 8, 1).unwrap();
        let pairs: Vec<PolicyPair> = vec![(&BfsOracle, &BfsOracle), (&BfsOracle, &BfsOracle)];
        let c = compare_shaping(&pairs, &env, &suite, true, Exec::Sequential).unwrap();
        assert_eq!(c.rows.len(), 8);
        assert_eq!(c.shaped_mean_steps, c.unshaped_mean_steps);
        assert_eq!(c.relative_reduction, 0.0);
        assert!(c.rows.iter().all(|r| r.delta == 0.0));
        assert!(compare_shaping(&pairs, &env, &[], true, Exec::Sequential).is_err());
        assert_eq!(c.to_csv().lines().count(), 1 + 8 + 1);
    }

    #[test]
    fn suite_runs_merge_by_name_in_both_modes() {
        let env = Environment::default_simple();
        let suite = generate_suite(&env, 6, 2).unwrap();
        let a = run_suite(&BfsOracle, &env, &suite, 3, true, Exec::Sequential).unwrap();
        let b = run_suite(&BfsOracle, &env, &suite, 3, true, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0].name < w[1].name));
        let mut dup = suite.clone();
        dup[1].name = dup[0].name.clone();
        assert!(run_suite(&BfsOracle, &env, &dup, 3, true, Exec::Sequential).is_err());
    }

    #[test]
    fn export_is_byte_stable() {
        let env = Environment::default_simple();
        let suite = generate_suite(&env, 2, 0).unwrap();
        let results = run_suite(&BfsOracle, &env, &suite, 0, true, Exec::Sequential).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let first = export_artifacts(&results, dir.path()).unwrap();
        assert_eq!(first.len(), 2 * 2 + 2);
        let bytes: Vec<Vec<u8>> = first.iter().map(|p| std::fs::read(p).unwrap()).collect();
        let second = export_artifacts(&results, dir.path()).unwrap();
        assert_eq!(first, second);
        for (p, b) in second.iter().zip(&bytes) {
            assert_eq!(&std::fs::read(p).unwrap(), b);
        }
        let heat = heatmap_csv(&results[0]);
        let cells: u32 = heat
            .lines()
            .skip(1)
            .flat_map(|l| l.split(',').skip(2).map(|v| v.parse::<u32>().unwrap()).collect::<Vec<_>>())
            .sum();
        assert_eq!(cells as usize, results[0].trace.len());
        let (w, h, grids) = parse_visits_csv(&heat).unwrap();
        assert_eq!((w, h, grids.len()), (20, 20, 1));
        assert_eq!(grids[0].iter().sum::<f64>() as usize, results[0].trace.len());
        assert!(parse_visits_csv("stage,y,x0\n1,0,1,2\n").is_err());
    }

    #[test]
    fn suite_files_parse_single_objects_and_arrays() {
        let env = Environment::default_simple();
        let suite = generate_suite(&env, 3, 4).unwrap();
        let text = serde_json::to_string(&suite).unwrap();
        assert_eq!(parse_suite(&text).unwrap(), suite);
        let one = serde_json::to_string(&suite[0]).unwrap();
        assert_eq!(parse_suite(&one).unwrap(), vec![suite[0].clone()]);
        assert!(parse_suite(r#"[{"name":"x","start":[0,0],"colour":1}]"#).is_err());
    }

    #[test]
    fn generated_suites_are_valid_and_varied() {
        let env = Environment::default_simple();
        let suite = generate_suite(&env, 20, SUITE_SEED).unwrap();
        assert_eq!(suite, generate_suite(&env, 20, SUITE_SEED).unwrap());
        for sc in &suite {
            sc.validate(&env).unwrap();
            assert!(!sc.subgoals.is_empty());
        }
        for family in ["corner", "reversed", "round-trip", "tour"] {
            assert_eq!(suite.iter().filter(|s| s.name.starts_with(family)).count(), 5);
        }
        assert!(suite
            .iter()
            .filter(|s| s.name.starts_with("round-trip"))
            .all(|s| s.final_target == Some(s.start)));
    }
}
