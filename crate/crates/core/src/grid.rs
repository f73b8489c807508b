//! Deterministic 2D grid environments: the single-target grid and the
//! multi-stage key-door domain, plus breadth-first distance queries.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SIMPLE_HORIZON: usize = 1000;
pub const DEFAULT_KEY_DOOR_HORIZON: usize = 2000;

/// A cell coordinate. `x` is the column, `y` the row (row 0 is the top).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[i32; 2]", into = "[i32; 2]")]
pub struct GridPos {
    pub x: i32,
    pub y: i32,
}

impl GridPos {
    pub const fn new(x: i32, y: i32) -> Self {
        GridPos { x, y }
    }

    pub fn manhattan(self, other: GridPos) -> u32 {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }

    pub fn offset(self, action: Action) -> GridPos {
        let (dx, dy) = action.delta();
        GridPos::new(self.x + dx, self.y + dy)
    }
}

impl From<[i32; 2]> for GridPos {
    fn from(v: [i32; 2]) -> Self {
        GridPos::new(v[0], v[1])
    }
}

impl From<GridPos> for [i32; 2] {
    fn from(p: GridPos) -> Self {
        [p.x, p.y]
    }
}

impl fmt::Display for GridPos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

/// 4-connected moves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Up,
    Down,
    Left,
    Right,
}

impl Action {
    pub const COUNT: usize = 4;
    pub const ALL: [Action; 4] = [Action::Up, Action::Down, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        match self {
            Action::Up => 0,
            Action::Down => 1,
            Action::Left => 2,
            Action::Right => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Action::ALL.get(i).copied()
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Action::Up => (0, -1),
            Action::Down => (0, 1),
            Action::Left => (-1, 0),
            Action::Right => (1, 0),
        }
    }

    /// The geometric inverse on a 4-connected grid.
    pub fn inverse(self) -> Action {
        match self {
            Action::Up => Action::Down,
            Action::Down => Action::Up,
            Action::Left => Action::Right,
            Action::Right => Action::Left,
        }
    }

    /// The action moving `from` onto the adjacent cell `to`, if they are adjacent.
    pub fn between(from: GridPos, to: GridPos) -> Option<Action> {
        Action::ALL.into_iter().find(|a| from.offset(*a) == to)
    }
}

/// Scalar rewards per event. `goal` is the target reward on the simple grid
/// and the door reward in the key-door domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rewards {
    #[serde(default = "Rewards::default_goal")]
    pub goal: f64,
    #[serde(default = "Rewards::default_bonus")]
    pub bonus: f64,
    #[serde(default = "Rewards::default_penalty")]
    pub penalty: f64,
}

impl Rewards {
    fn default_goal() -> f64 {
        30.0
    }
    fn default_bonus() -> f64 {
        10.0
    }
    fn default_penalty() -> f64 {
        -10.0
    }

    pub fn key_door() -> Self {
        Rewards {
            goal: 100.0,
            bonus: 10.0,
            penalty: -10.0,
        }
    }
}

impl Default for Rewards {
    fn default() -> Self {
        Rewards {
            goal: Self::default_goal(),
            bonus: Self::default_bonus(),
            penalty: Self::default_penalty(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayout {
    width: i32,
    height: i32,
    #[serde(default)]
    walls: Vec<GridPos>,
    start: GridPos,
    target: GridPos,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bonus: Option<GridPos>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    penalty: Option<GridPos>,
    #[serde(default)]
    rewards: Rewards,
}

/// A validated grid layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "RawLayout", into = "RawLayout")]
pub struct GridLayout {
    width: i32,
    height: i32,
    walls: BTreeSet<GridPos>,
    wall_mask: Vec<bool>,
    start: GridPos,
    target: GridPos,
    bonus: Option<GridPos>,
    penalty: Option<GridPos>,
    rewards: Rewards,
    distances: DistanceCache,
}

impl TryFrom<RawLayout> for GridLayout {
    type Error = Error;

    fn try_from(raw: RawLayout) -> Result<Self> {
        GridLayout::build(raw)
    }
}

impl From<GridLayout> for RawLayout {
    fn from(l: GridLayout) -> Self {
        RawLayout {
            width: l.width,
            height: l.height,
            walls: l.walls.into_iter().collect(),
            start: l.start,
            target: l.target,
            bonus: l.bonus,
            penalty: l.penalty,
            rewards: l.rewards,
        }
    }
}

/// Builder-style description used to construct layouts in code.
#[derive(Debug, Clone)]
pub struct LayoutBuilder {
    raw: RawLayout,
}

impl LayoutBuilder {
    pub fn new(width: i32, height: i32, start: GridPos, target: GridPos) -> Self {
        LayoutBuilder {
            raw: RawLayout {
                width,
                height,
                walls: Vec::new(),
                start,
                target,
                bonus: None,
                penalty: None,
                rewards: Rewards::default(),
            },
        }
    }

    pub fn wall(mut self, p: GridPos) -> Self {
        self.raw.walls.push(p);
        self
    }

    pub fn walls(mut self, ps: impl IntoIterator<Item = GridPos>) -> Self {
        self.raw.walls.extend(ps);
        self
    }

    pub fn bonus(mut self, p: GridPos) -> Self {
        self.raw.bonus = Some(p);
        self
    }

    pub fn penalty(mut self, p: GridPos) -> Self {
        self.raw.penalty = Some(p);
        self
    }

    pub fn rewards(mut self, r: Rewards) -> Self {
        self.raw.rewards = r;
        self
    }

    pub fn build(self) -> Result<GridLayout> {
        GridLayout::build(self.raw)
    }
}

impl GridLayout {
    fn build(raw: RawLayout) -> Result<Self> {
        if raw.width <= 0 {
            return Err(Error::config("width", "must be positive"));
        }
        if raw.height <= 0 {
            return Err(Error::config("height", "must be positive"));
        }
        let in_bounds =
            |p: GridPos| p.x >= 0 && p.y >= 0 && p.x < raw.width && p.y < raw.height;
        let mut wall_mask = vec![false; (raw.width * raw.height) as usize];
        for (i, w) in raw.walls.iter().enumerate() {
            if !in_bounds(*w) {
                return Err(Error::config(format!("walls[{i}]"), format!("{w} out of bounds")));
            }
            wall_mask[(w.y * raw.width + w.x) as usize] = true;
        }
        let mut named = vec![("start", raw.start), ("target", raw.target)];
        if let Some(b) = raw.bonus {
            named.push(("bonus", b));
        }
        if let Some(p) = raw.penalty {
            named.push(("penalty", p));
        }
        for (field, p) in &named {
            if !in_bounds(*p) {
                return Err(Error::config(*field, format!("{p} out of bounds")));
            }
            if wall_mask[(p.y * raw.width + p.x) as usize] {
                return Err(Error::config(*field, format!("{p} is inside a wall")));
            }
        }
        for (name, v) in [
            ("rewards.goal", raw.rewards.goal),
            ("rewards.bonus", raw.rewards.bonus),
            ("rewards.penalty", raw.rewards.penalty),
        ] {
            if !v.is_finite() {
                return Err(Error::config(name, "must be finite"));
            }
        }
        let cells = (raw.width * raw.height) as usize;
        let layout = GridLayout {
            width: raw.width,
            height: raw.height,
            walls: raw.walls.into_iter().collect(),
            wall_mask,
            start: raw.start,
            target: raw.target,
            bonus: raw.bonus,
            penalty: raw.penalty,
            rewards: raw.rewards,
            distances: DistanceCache::new(cells),
        };
        if layout.distance(layout.start, layout.target).is_none() {
            return Err(Error::config("target", "not reachable from start"));
        }
        if let Some(b) = layout.bonus {
            if layout.distance(layout.start, b).is_none() {
                return Err(Error::config("bonus", "not reachable from start"));
            }
        }
        Ok(layout)
    }

    pub fn width(&self) -> i32 {
        self.width
    }

    pub fn height(&self) -> i32 {
        self.height
    }

    pub fn start(&self) -> GridPos {
        self.start
    }

    pub fn target(&self) -> GridPos {
        self.target
    }

    pub fn bonus(&self) -> Option<GridPos> {
        self.bonus
    }

    pub fn penalty(&self) -> Option<GridPos> {
        self.penalty
    }

    pub fn rewards(&self) -> Rewards {
        self.rewards
    }

    pub fn walls(&self) -> impl Iterator<Item = GridPos> + '_ {
        self.walls.iter().copied()
    }

    pub fn cell_count(&self) -> usize {
        (self.width * self.height) as usize
    }

    pub fn in_bounds(&self, p: GridPos) -> bool {
        p.x >= 0 && p.y >= 0 && p.x < self.width && p.y < self.height
    }

    pub fn is_wall(&self, p: GridPos) -> bool {
        self.in_bounds(p) && self.wall_mask[self.index(p)]
    }

    /// In bounds and not a wall.
    pub fn is_free(&self, p: GridPos) -> bool {
        self.in_bounds(p) && !self.wall_mask[self.index(p)]
    }

    pub fn free_cells(&self) -> impl Iterator<Item = GridPos> + '_ {
        (0..self.height)
            .flat_map(move |y| (0..self.width).map(move |x| GridPos::new(x, y)))
            .filter(|p| self.is_free(*p))
    }

    fn index(&self, p: GridPos) -> usize {
        (p.y * self.width + p.x) as usize
    }

    fn position(&self, i: usize) -> GridPos {
        GridPos::new(i as i32 % self.width, i as i32 / self.width)
    }

    /// BFS distance field from `source` over free cells; `u32::MAX` marks
    /// unreachable cells.
    fn bfs_field(&self, source: GridPos) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.cell_count()];
        if !self.is_free(source) {
            return dist;
        }
        let mut queue = VecDeque::new();
        dist[self.index(source)] = 0;
        queue.push_back(source);
        while let Some(p) = queue.pop_front() {
            let d = dist[self.index(p)];
            for a in Action::ALL {
                let n = p.offset(a);
                if self.is_free(n) && dist[self.index(n)] == u32::MAX {
                    dist[self.index(n)] = d + 1;
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    /// Shortest 4-connected path length, `None` when disconnected or when
    /// either endpoint is not a free cell. Distance fields are cached per
    /// destination, so repeated queries toward the same goal are O(1).
    pub fn distance(&self, from: GridPos, to: GridPos) -> Option<u32> {
        if !self.is_free(from) || !self.is_free(to) {
            return None;
        }
        let field = self.distances.field(self.index(to), || self.bfs_field(to));
        match field[self.index(from)] {
            u32::MAX => None,
            d => Some(d),
        }
    }

    /// The free cells reachable from `from`.
    pub fn reachable_from(&self, from: GridPos) -> Vec<GridPos> {
        self.bfs_field(from)
            .iter()
            .enumerate()
            .filter(|(_, d)| **d != u32::MAX)
            .map(|(i, _)| self.position(i))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Lazily computed per-destination BFS fields. Safe to share across threads.
#[derive(Debug, Clone)]
struct DistanceCache {
    fields: Vec<OnceLock<Vec<u32>>>,
}

impl DistanceCache {
    fn new(cells: usize) -> Self {
        DistanceCache {
            fields: (0..cells).map(|_| OnceLock::new()).collect(),
        }
    }

    fn field(&self, index: usize, init: impl FnOnce() -> Vec<u32>) -> &[u32] {
        self.fields[index].get_or_init(init)
    }
}

/// Shortest path length between two free cells.
pub fn shortest_path_len(layout: &GridLayout, from: GridPos, to: GridPos) -> Result<u32> {
    for (name, p) in [("from", from), ("to", to)] {
        if !layout.is_free(p) {
            return Err(Error::usage(format!("{name} {p} is not a free cell")));
        }
    }
    layout.distance(from, to).ok_or(Error::Unreachable { from, to })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Simple,
    KeyDoor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Event {
    None,
    Bonus,
    Penalty,
    Goal,
    Blocked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvState {
    pub pos: GridPos,
    /// 1-based stage index; always 1 on the simple grid.
    pub stage: usize,
    pub has_bonus: bool,
    pub penalty_taken: bool,
    pub t: usize,
    pub done: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub next: EnvState,
    pub reward: f64,
    pub done: bool,
    pub event: Event,
    /// The cell the agent moved onto. Differs from `next.pos` only when a
    /// door transports the agent to the next stage's start.
    pub entered: GridPos,
}

/// An environment: one layout (simple grid) or an ordered set of stage
/// layouts (key-door), plus the horizon.
#[derive(Debug, Clone)]
pub struct Environment {
    kind: EnvKind,
    stages: Vec<GridLayout>,
    horizon: usize,
    /// Whether entering the simple grid's target ends the episode.
    terminal_target: bool,
}

impl Environment {
    pub fn simple(layout: GridLayout) -> Self {
        Environment {
            kind: EnvKind::Simple,
            stages: vec![layout],
            horizon: DEFAULT_SIMPLE_HORIZON,
            terminal_target: true,
        }
    }

    /// Every stage needs a bonus cell (the key for that stage's door).
    pub fn key_door(stages: Vec<GridLayout>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::config("stages", "key-door set needs at least one stage"));
        }
        for (i, s) in stages.iter().enumerate() {
            if s.bonus.is_none() {
                return Err(Error::config(format!("stages[{i}].bonus"), "key-door stage needs a bonus (key) cell"));
            }
            if s.width != stages[0].width || s.height != stages[0].height {
                return Err(Error::config(format!("stages[{i}].width"), "all stages must share dimensions"));
            }
        }
        Ok(Environment {
            kind: EnvKind::KeyDoor,
            stages,
            horizon: DEFAULT_KEY_DOOR_HORIZON,
            terminal_target: true,
        })
    }

    /// One layout gives the simple grid, several give a key-door set.
    pub fn from_layouts(layouts: Vec<GridLayout>) -> Result<Self> {
        match layouts.len() {
            0 => Err(Error::config("layouts", "layout set is empty")),
            1 => Ok(Environment::simple(layouts.into_iter().next().unwrap())),
            _ => Environment::key_door(layouts),
        }
    }

    /// Parses a layout file: a JSON object is a simple grid, a JSON array of
    /// objects is a key-door stage set.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value {
            serde_json::Value::Array(items) => {
                let mut stages = Vec::with_capacity(items.len());
                for (i, item) in items.into_iter().enumerate() {
                    let layout: GridLayout = serde_json::from_value(item).map_err(|e| {
                        Error::config(format!("stages[{i}]"), e.to_string())
                    })?;
                    stages.push(layout);
                }
                Environment::key_door(stages)
            }
            other => {
                let layout: GridLayout = serde_json::from_value(other)
                    .map_err(|e| Error::config("layout", e.to_string()))?;
                Ok(Environment::simple(layout))
            }
        }
    }

    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon.max(1);
        self
    }

    /// The simple grid's target becomes an ordinary cell: no reward, no
    /// termination. Scenarios use this, since their final target is their
    /// own. Key-door doors are unaffected.
    pub fn without_terminal_target(mut self) -> Self {
        self.terminal_target = false;
        self
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn stages(&self) -> &[GridLayout] {
        &self.stages
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Layout of a 1-based stage.
    pub fn layout(&self, stage: usize) -> &GridLayout {
        &self.stages[stage.clamp(1, self.stages.len()) - 1]
    }

    pub fn reset(&self) -> EnvState {
        EnvState {
            pos: self.stages[0].start,
            stage: 1,
            has_bonus: false,
            penalty_taken: false,
            t: 0,
            done: false,
        }
    }

    /// Reset with an overridden start cell on stage 1.
    pub fn reset_at(&self, start: GridPos) -> Result<EnvState> {
        if !self.stages[0].is_free(start) {
            return Err(Error::usage(format!("start {start} is not a free cell")));
        }
        Ok(EnvState {
            pos: start,
            ..self.reset()
        })
    }

    pub fn step(&self, state: &EnvState, action: Action) -> Result<StepOutcome> {
        if state.done {
            return Err(Error::usage("step called on a finished episode"));
        }
        let layout = self.layout(state.stage);
        if !layout.is_free(state.pos) {
            return Err(Error::usage(format!("state position {} is not a free cell", state.pos)));
        }
        let mut next = *state;
        next.t += 1;
        let candidate = state.pos.offset(action);
        let mut reward = 0.0;
        let mut event = Event::None;
        let entered;
        if !layout.is_free(candidate) {
            event = Event::Blocked;
            entered = state.pos;
        } else {
            entered = candidate;
            next.pos = candidate;
            let rewards = layout.rewards;
            if layout.bonus == Some(candidate) && !state.has_bonus {
                reward += rewards.bonus;
                next.has_bonus = true;
                event = Event::Bonus;
            }
            if layout.penalty == Some(candidate) && !state.penalty_taken {
                reward += rewards.penalty;
                next.penalty_taken = true;
                event = Event::Penalty;
            }
            if candidate == layout.target {
                match self.kind {
                    EnvKind::Simple if !self.terminal_target => {}
                    EnvKind::Simple => {
                        reward += rewards.goal;
                        event = Event::Goal;
                        next.done = true;
                    }
                    EnvKind::KeyDoor if state.has_bonus => {
                        reward += rewards.goal;
                        event = Event::Goal;
                        if state.stage >= self.stages.len() {
                            next.done = true;
                        } else {
                            next.stage = state.stage + 1;
                            next.pos = self.layout(next.stage).start;
                            next.has_bonus = false;
                            next.penalty_taken = false;
                        }
                    }
                    // Door without key: nothing happens.
                    EnvKind::KeyDoor => {}
                }
            }
        }
        if next.t >= self.horizon {
            next.done = true;
        }
        Ok(StepOutcome {
            next,
            reward,
            done: next.done,
            event,
            entered,
        })
    }

    /// Width of `encode` without a goal.
    pub fn state_dim(&self) -> usize {
        match self.kind {
            EnvKind::Simple => 2,
            EnvKind::KeyDoor => 3 + self.stages.len(),
        }
    }

    pub const GOAL_DIM: usize = 2;

    /// Feature vector: normalized position, then (key-door only) the key flag
    /// and a stage one-hot, then the normalized goal when one is given.
    pub fn encode(&self, state: &EnvState, goal: Option<GridPos>) -> Vec<f64> {
        let mut v = self.encode_parts(state.pos, state.stage, state.has_bonus);
        if let Some(g) = goal {
            self.append_goal(&mut v, state.stage, g);
        }
        v
    }

    pub fn encode_parts(&self, pos: GridPos, stage: usize, has_bonus: bool) -> Vec<f64> {
        let layout = self.layout(stage);
        let mut v = Vec::with_capacity(self.state_dim() + Self::GOAL_DIM);
        v.push(pos.x as f64 / layout.width as f64);
        v.push(pos.y as f64 / layout.height as f64);
        if self.kind == EnvKind::KeyDoor {
            v.push(if has_bonus { 1.0 } else { 0.0 });
            for s in 1..=self.stages.len() {
                v.push(if s == stage { 1.0 } else { 0.0 });
            }
        }
        v
    }

    pub fn append_goal(&self, v: &mut Vec<f64>, stage: usize, goal: GridPos) {
        let layout = self.layout(stage);
        v.push(goal.x as f64 / layout.width as f64);
        v.push(goal.y as f64 / layout.height as f64);
    }

    /// Built-in 20x20 simple grid.
    /// `"simple"`, `"key-door"`, or a path to a layout JSON file.
    pub fn resolve(reference: &str) -> Result<Self> {
        match reference {
            "simple" => Ok(Environment::default_simple()),
            "key-door" => Ok(Environment::default_key_door()),
            path => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::config("layout", format!("cannot read {path}: {e}")))?;
                Environment::from_json(&text)
            }
        }
    }

    pub fn default_simple() -> Self {
        Environment::from_json(include_str!("../../../data/layouts/simple20.json"))
            .expect("built-in simple layout is valid")
    }

    /// Built-in 4-stage key-door set.
    pub fn default_key_door() -> Self {
        Environment::from_json(include_str!("../../../data/layouts/keydoor4.json"))
            .expect("built-in key-door layout is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn open(w: i32, h: i32) -> GridLayout {
        LayoutBuilder::new(w, h, GridPos::new(0, 0), GridPos::new(w - 1, h - 1))
            .build()
            .unwrap()
    }

    fn reference_bfs(layout: &GridLayout, from: GridPos, to: GridPos) -> Option<u32> {
        // Plain textbook BFS with a visited set, independent of the cached field.
        let mut seen = std::collections::HashSet::new();
        let mut q = VecDeque::from([(from, 0u32)]);
        seen.insert(from);
        while let Some((p, d)) = q.pop_front() {
            if p == to {
                return Some(d);
            }
            for a in Action::ALL {
                let n = p.offset(a);
                if layout.is_free(n) && seen.insert(n) {
                    q.push_back((n, d + 1));
                }
            }
        }
        None
    }

    #[test]
    fn reset_is_stage_one_at_start() {
        let env = Environment::default_simple();
        let s = env.reset();
        assert_eq!(s.pos, env.layout(1).start());
        assert_eq!(s.stage, 1);
        assert!(!s.has_bonus);
        assert_eq!(s.t, 0);
        assert_eq!(Environment::default_key_door().stage_count(), 4);
        assert_eq!(Environment::default_key_door().reset().stage, 1);
    }

    #[test]
    fn target_inside_wall_is_rejected() {
        let err = LayoutBuilder::new(5, 5, GridPos::new(0, 0), GridPos::new(3, 3))
            .wall(GridPos::new(3, 3))
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "target"), "{err}");
    }

    #[test]
    fn unreachable_target_is_rejected() {
        let err = LayoutBuilder::new(5, 5, GridPos::new(0, 0), GridPos::new(4, 0))
            .walls((0..5).map(|y| GridPos::new(2, y)))
            .build()
            .unwrap_err();
        assert!(err.to_string().contains("target"));
    }

    #[test]
    fn json_errors_name_the_field() {
        let err = Environment::from_json(r#"{"width":5,"height":5,"start":[0,0],"target":[9,9]}"#)
            .unwrap_err();
        assert!(err.to_string().contains("target"), "{err}");
        let err = Environment::from_json(r#"[{"width":5,"height":5,"start":[0,0],"target":[4,4]}]"#)
            .unwrap_err();
        assert!(err.to_string().contains("stages[0].bonus"), "{err}");
    }

    #[test]
    fn plain_move_has_zero_reward() {
        let env = Environment::default_simple();
        let s = env.reset_at(GridPos::new(5, 5)).unwrap();
        let out = env.step(&s, Action::Up).unwrap();
        assert_eq!(out.next.pos, GridPos::new(5, 4));
        assert_eq!(out.reward, 0.0);
        assert_eq!(out.event, Event::None);
        assert!(!out.done);
    }

    #[test]
    fn entering_simple_target_pays_thirty_and_ends() {
        let env = Environment::simple(
            LayoutBuilder::new(4, 1, GridPos::new(0, 0), GridPos::new(1, 0)).build().unwrap(),
        );
        let out = env.step(&env.reset(), Action::Right).unwrap();
        assert_eq!(out.reward, 30.0);
        assert!(out.done);
        assert_eq!(out.event, Event::Goal);
        assert!(env.step(&out.next, Action::Left).is_err());
    }

    fn corridor_stage() -> GridLayout {
        // start(0,0) penalty(1,0) bonus(2,0) door(4,0)
        LayoutBuilder::new(5, 1, GridPos::new(0, 0), GridPos::new(4, 0))
            .bonus(GridPos::new(2, 0))
            .penalty(GridPos::new(1, 0))
            .rewards(Rewards::key_door())
            .build()
            .unwrap()
    }

    #[test]
    fn key_door_rewards_and_stage_progression() {
        let env = Environment::key_door(vec![corridor_stage(), corridor_stage()]).unwrap();
        let s0 = env.reset();
        let a = env.step(&s0, Action::Right).unwrap();
        assert_eq!((a.reward, a.event), (-10.0, Event::Penalty));
        let b = env.step(&a.next, Action::Right).unwrap();
        assert_eq!((b.reward, b.event), (10.0, Event::Bonus));
        assert!(b.next.has_bonus);
        // Back over the penalty and bonus: nothing fires twice.
        let c = env.step(&b.next, Action::Left).unwrap();
        assert_eq!(c.reward, 0.0);
        let d = env.step(&c.next, Action::Right).unwrap();
        assert_eq!(d.reward, 0.0);
        let e = env.step(&d.next, Action::Right).unwrap();
        let f = env.step(&e.next, Action::Right).unwrap();
        assert_eq!((f.reward, f.event), (100.0, Event::Goal));
        assert_eq!(f.next.stage, 2);
        assert_eq!(f.next.pos, GridPos::new(0, 0));
        assert!(!f.next.has_bonus && !f.next.penalty_taken);
        assert_eq!(f.entered, GridPos::new(4, 0));
        assert!(!f.done);
    }

    #[test]
    fn door_without_key_does_nothing() {
        let stage = LayoutBuilder::new(3, 2, GridPos::new(0, 0), GridPos::new(1, 0))
            .bonus(GridPos::new(0, 1))
            .build()
            .unwrap();
        let env = Environment::key_door(vec![stage.clone(), stage]).unwrap();
        let out = env.step(&env.reset(), Action::Right).unwrap();
        assert_eq!(out.next.stage, 1);
        assert_eq!(out.reward, 0.0);
        assert_eq!(out.next.pos, GridPos::new(1, 0));
        assert!(!out.done);
    }

    #[test]
    fn final_door_ends_episode() {
        let env = Environment::key_door(vec![corridor_stage()]).unwrap();
        let mut s = env.reset();
        let mut last = None;
        for _ in 0..4 {
            let out = env.step(&s, Action::Right).unwrap();
            s = out.next;
            last = Some(out);
        }
        let last = last.unwrap();
        assert!(last.done);
        assert_eq!(last.event, Event::Goal);
    }

    #[test]
    fn horizon_ends_episode() {
        let env = Environment::default_simple().with_horizon(3);
        let mut s = env.reset();
        for i in 0..3 {
            let out = env.step(&s, if i % 2 == 0 { Action::Up } else { Action::Down }).unwrap();
            s = out.next;
        }
        assert!(s.done);
        assert_eq!(s.t, 3);
    }

    #[test]
    fn walls_and_edges_block() {
        let layout = LayoutBuilder::new(3, 3, GridPos::new(0, 0), GridPos::new(2, 2))
            .wall(GridPos::new(1, 0))
            .build()
            .unwrap();
        let env = Environment::simple(layout);
        let s = env.reset();
        for a in [Action::Up, Action::Left, Action::Right] {
            let out = env.step(&s, a).unwrap();
            assert_eq!(out.event, Event::Blocked);
            assert_eq!(out.next.pos, s.pos);
            assert_eq!(out.reward, 0.0);
        }
    }

    #[test]
    fn shortest_path_examples() {
        let l = open(10, 10);
        let p = GridPos::new(4, 4);
        assert_eq!(shortest_path_len(&l, p, p).unwrap(), 0);
        assert_eq!(shortest_path_len(&l, GridPos::new(0, 0), GridPos::new(3, 4)).unwrap(), 7);
        assert_eq!(reference_bfs(&l, GridPos::new(0, 0), GridPos::new(3, 4)), Some(7));

        let split = LayoutBuilder::new(5, 5, GridPos::new(0, 0), GridPos::new(1, 1))
            .walls((0..5).map(|y| GridPos::new(2, y)))
            .build()
            .unwrap();
        assert!(matches!(
            shortest_path_len(&split, GridPos::new(0, 0), GridPos::new(4, 4)),
            Err(Error::Unreachable { .. })
        ));
    }

    #[test]
    fn non_terminal_target_is_walked_through() {
        let env = Environment::simple(open(3, 1)).without_terminal_target();
        let s = env.reset_at(GridPos::new(1, 0)).unwrap();
        let out = env.step(&s, Action::Right).unwrap();
        assert_eq!(out.next.pos, GridPos::new(2, 0));
        assert!(!out.done);
        assert_eq!(out.reward, 0.0);
        assert_eq!(out.event, Event::None);
    }

    #[test]
    fn encode_examples() {
        let env = Environment::default_simple();
        let s = env.reset_at(GridPos::new(10, 10)).unwrap();
        assert_eq!(env.encode(&s, None), vec![0.5, 0.5]);
        assert_eq!(env.encode(&s, Some(GridPos::new(0, 0))), vec![0.5, 0.5, 0.0, 0.0]);

        let kd = Environment::default_key_door();
        let st = EnvState {
            pos: kd.layout(3).start(),
            stage: 3,
            has_bonus: true,
            penalty_taken: false,
            t: 0,
            done: false,
        };
        let v = kd.encode(&st, None);
        assert_eq!(v.len(), 7);
        assert_eq!(v[2], 1.0);
        assert_eq!(&v[3..], &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn shipped_layouts_round_trip() {
        for env in [Environment::default_simple(), Environment::default_key_door()] {
            for stage in env.stages() {
                let back: GridLayout = serde_json::from_str(&stage.to_json().unwrap()).unwrap();
                assert_eq!(back.start(), stage.start());
                assert_eq!(back.walls().count(), stage.walls().count());
            }
        }
    }

    fn arb_layout() -> impl Strategy<Value = GridLayout> {
        (3i32..9, 3i32..9, prop::collection::vec((0i32..9, 0i32..9), 0..20)).prop_filter_map(
            "valid layout",
            |(w, h, walls)| {
                let walls: Vec<_> = walls
                    .into_iter()
                    .map(|(x, y)| GridPos::new(x % w, y % h))
                    .filter(|p| *p != GridPos::new(0, 0) && *p != GridPos::new(w - 1, h - 1))
                    .collect();
                LayoutBuilder::new(w, h, GridPos::new(0, 0), GridPos::new(w - 1, h - 1))
                    .walls(walls)
                    .build()
                    .ok()
            },
        )
    }

    proptest! {
        #[test]
        fn random_walks_stay_in_bounds_and_off_walls(
            layout in arb_layout(),
            actions in prop::collection::vec(0usize..4, 1..200),
        ) {
            let env = Environment::simple(layout).with_horizon(10_000);
            let mut s = env.reset();
            for a in actions {
                if s.done { break; }
                let action = Action::from_index(a).unwrap();
                let out = env.step(&s, action).unwrap();
                // Determinism.
                prop_assert_eq!(env.step(&s, action).unwrap(), out);
                prop_assert!(env.layout(1).is_free(out.next.pos));
                if out.event != Event::Blocked && !out.done {
                    let back = env.step(&out.next, action.inverse()).unwrap();
                    if back.event != Event::Blocked {
                        prop_assert_eq!(back.next.pos, s.pos);
                    }
                }
                s = out.next;
            }
        }

        #[test]
        fn bfs_is_a_metric_and_matches_reference(
            layout in arb_layout(),
            picks in prop::collection::vec((0usize..81, 0usize..81, 0usize..81), 1..10),
        ) {
            let free: Vec<_> = layout.free_cells().collect();
            for (i, j, k) in picks {
                let (a, b, c) = (free[i % free.len()], free[j % free.len()], free[k % free.len()]);
                let ab = layout.distance(a, b);
                prop_assert_eq!(ab, reference_bfs(&layout, a, b));
                prop_assert_eq!(ab, layout.distance(b, a));
                if let (Some(ab), Some(bc), Some(ac)) = (ab, layout.distance(b, c), layout.distance(a, c)) {
                    prop_assert!(ac <= ab + bc);
                }
                if let Some(d) = ab {
                    prop_assert!(d >= a.manhattan(b));
                }
            }
        }

        #[test]
        fn bfs_equals_manhattan_without_walls(w in 1i32..15, h in 1i32..15, ax in 0i32..15, ay in 0i32..15, bx in 0i32..15, by in 0i32..15) {
            let l = LayoutBuilder::new(w, h, GridPos::new(0, 0), GridPos::new(w - 1, h - 1)).build().unwrap();
            let a = GridPos::new(ax % w, ay % h);
            let b = GridPos::new(bx % w, by % h);
            prop_assert_eq!(l.distance(a, b), Some(a.manhattan(b)));
        }
    }
}
