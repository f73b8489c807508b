//! Synchronous session core. The server wraps each one in its own task; all
//! mutation goes through `&mut self`, so operations are totally ordered.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use waypoint_core::error::{Error, Result};
use waypoint_core::grid::{EnvState, Environment, GridPos};
use waypoint_core::scenario::{mission_env, NavPlan, Navigator, TracePoint};
use waypoint_core::subgoal::{GoalPolicy, SubgoalAgent};

use crate::protocol::{CreateRequest, LayoutView, StateMessage, Status, PROTOCOL_VERSION};

pub struct Session {
    id: u64,
    env: Environment,
    agent: Arc<SubgoalAgent>,
    plan: NavPlan,
    nav: Navigator,
    start: GridPos,
    state: EnvState,
    seed: u64,
    rng: ChaCha8Rng,
    greedy: bool,
    tick_rate: f64,
    seq: u64,
    reported: usize,
    show_layout: bool,
    trace: Vec<TracePoint>,
}

impl Session {
    pub fn new(id: u64, req: &CreateRequest, env: &Environment, agent: Arc<SubgoalAgent>) -> Result<Self> {
        if !(req.tick_rate.is_finite() && req.tick_rate >= 0.0) {
            return Err(Error::config("tick_rate", "must be a finite number >= 0"));
        }
        if req.horizon == Some(0) {
            return Err(Error::config("horizon", "must be positive"));
        }
        if req.per_subgoal_budget == Some(0) {
            return Err(Error::config("per_subgoal_budget", "must be positive"));
        }
        let want = env.state_dim() + Environment::GOAL_DIM;
        if agent.input_dim() != want {
            return Err(Error::Format(format!(
                "checkpoint expects {} inputs, layout provides {want}",
                agent.input_dim()
            )));
        }
        let horizon = req.horizon.unwrap_or(env.horizon());
        let env = mission_env(env, horizon);
        let start = req.start.unwrap_or(env.layout(1).start());
        let state = env.reset_at(start)?;
        if let Some(f) = req.final_target {
            if !env.layout(1).is_free(f) {
                return Err(Error::config("final_target", format!("{f} is out of bounds or a wall")));
            }
        }
        let plan = NavPlan {
            waypoints: vec![Vec::new()],
            final_target: req.final_target,
            stage_tiers: false,
            per_subgoal_budget: req.per_subgoal_budget,
            horizon,
        };
        Ok(Session {
            id,
            nav: Navigator::new(plan.clone()),
            plan,
            env,
            agent,
            start,
            trace: vec![TracePoint::of(&state)],
            state,
            seed: req.seed,
            rng: ChaCha8Rng::seed_from_u64(req.seed),
            greedy: req.greedy,
            tick_rate: req.tick_rate,
            seq: 0,
            reported: 0,
            show_layout: true,
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn tick_rate(&self) -> f64 {
        self.tick_rate
    }

    pub fn trace(&self) -> &[TracePoint] {
        &self.trace
    }

    pub fn status(&self) -> Status {
        if self.state.done {
            Status::Done
        } else if self.nav.has_work() {
            Status::Running
        } else {
            Status::Idle
        }
    }

    pub fn place_goal(&mut self, goal: GridPos) -> Result<Vec<GridPos>> {
        if self.state.done {
            return Err(Error::state("session is done"));
        }
        self.nav.push(&self.env, &self.state, goal)?;
        Ok(self.nav.queued().to_vec())
    }

    pub fn clear_goals(&mut self) {
        self.nav.clear();
    }

    pub fn reset(&mut self) -> Result<()> {
        self.state = self.env.reset_at(self.start)?;
        self.nav = Navigator::new(self.plan.clone());
        self.rng = ChaCha8Rng::seed_from_u64(self.seed);
        self.reported = 0;
        self.show_layout = true;
        self.trace = vec![TracePoint::of(&self.state)];
        Ok(())
    }

    /// One greedy step toward the dispatched goal. `Ok(false)` means the
    /// queue is empty and the agent stayed put.
    pub fn tick(&mut self) -> Result<bool> {
        if self.state.done {
            return Err(Error::state("session is done"));
        }
        let Some(goal) = self.nav.dispatch(&self.env, &self.state) else {
            return Ok(false);
        };
        let a = self
            .agent
            .goal_action(&self.env, &self.state, goal, self.greedy, &mut self.rng)?;
        let out = self.env.step(&self.state, a)?;
        self.nav.observe(&self.state, &out);
        if out.next.stage != self.state.stage {
            self.show_layout = true;
        }
        self.state = out.next;
        self.trace.push(TracePoint::of(&self.state));
        Ok(true)
    }

    /// The next state message; carries the goal events resolved since the
    /// previous one.
    pub fn message(&mut self) -> StateMessage {
        self.seq += 1;
        let events = self.nav.outcomes()[self.reported..].to_vec();
        self.reported = self.nav.outcomes().len();
        let layout = std::mem::take(&mut self.show_layout).then(|| {
            let l = self.env.layout(self.state.stage);
            LayoutView {
                width: l.width(),
                height: l.height(),
                walls: l.walls().collect(),
                target: l.target(),
                bonus: l.bonus(),
                penalty: l.penalty(),
            }
        });
        StateMessage {
            v: PROTOCOL_VERSION,
            session: self.id,
            seq: self.seq,
            step: self.state.t,
            pos: self.state.pos,
            stage: self.state.stage,
            has_bonus: self.state.has_bonus,
            status: self.status(),
            goal: self.nav.current_goal(),
            queue: self.nav.queued().to_vec(),
            events,
            layout,
        }
    }
}
