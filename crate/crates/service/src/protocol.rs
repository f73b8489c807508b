//! Wire protocol, version 1. One JSON object per text frame (or per HTTP
//! request body), discriminated by `kind`, always carrying `"v": 1`.

use serde::{Deserialize, Serialize};
use waypoint_core::grid::GridPos;
use waypoint_core::scenario::GoalOutcome;

pub const PROTOCOL_VERSION: u32 = 1;

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

/// A built-in layout name (`"simple"`, `"key-door"`) or an inline layout
/// object / stage array in the layout file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayoutSpec {
    Named(String),
    Inline(serde_json::Value),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub v: u32,
    pub layout: LayoutSpec,
    /// Sub-goal checkpoint, relative to the server's checkpoint root.
    pub checkpoint: String,
    /// Automatic steps per second; 0 means the client drives with `step`.
    #[serde(default)]
    pub tick_rate: f64,
    #[serde(default = "yes")]
    pub greedy: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start: Option<GridPos>,
    /// Pursued with the remaining horizon once the queue runs dry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_target: Option<GridPos>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_subgoal_budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Request {
    Create(CreateRequest),
    PlaceGoal { v: u32, session: u64, goal: GridPos },
    ClearGoals { v: u32, session: u64 },
    Reset { v: u32, session: u64 },
    /// Manual stepping; answered with one state message per step taken.
    Step {
        v: u32,
        session: u64,
        #[serde(default = "one")]
        count: usize,
    },
    State { v: u32, session: u64 },
}

impl Request {
    pub fn version(&self) -> u32 {
        match self {
            Request::Create(c) => c.v,
            Request::PlaceGoal { v, .. }
            | Request::ClearGoals { v, .. }
            | Request::Reset { v, .. }
            | Request::Step { v, .. }
            | Request::State { v, .. } => *v,
        }
    }

    pub fn session(&self) -> Option<u64> {
        match self {
            Request::Create(_) => None,
            Request::PlaceGoal { session, .. }
            | Request::ClearGoals { session, .. }
            | Request::Reset { session, .. }
            | Request::Step { session, .. }
            | Request::State { session, .. } => Some(*session),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Idle,
    Running,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutView {
    pub width: i32,
    pub height: i32,
    pub walls: Vec<GridPos>,
    pub target: GridPos,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bonus: Option<GridPos>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub penalty: Option<GridPos>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    pub v: u32,
    pub session: u64,
    /// Strictly increasing per session.
    pub seq: u64,
    /// Environment steps taken since the last reset.
    pub step: usize,
    pub pos: GridPos,
    pub stage: usize,
    pub has_bonus: bool,
    pub status: Status,
    pub goal: Option<GridPos>,
    pub queue: Vec<GridPos>,
    /// Goals resolved since the previous message.
    pub events: Vec<GoalOutcome>,
    /// Present on the first message and after resets or stage changes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<LayoutView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Response {
    State(StateMessage),
    PlaceGoal {
        v: u32,
        session: u64,
        goal: GridPos,
        queue: Vec<GridPos>,
    },
    ClearGoals {
        v: u32,
        session: u64,
    },
    Error {
        v: u32,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session: Option<u64>,
        message: String,
    },
}

impl Response {
    pub fn error(session: Option<u64>, message: impl Into<String>) -> Self {
        Response::Error {
            v: PROTOCOL_VERSION,
            session,
            message: message.into(),
        }
    }
}
