//! Goal-reach probes: greedy rollouts toward sampled goals, scored against
//! a multiple of the BFS distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{EnvState, Environment, GridPos};
use crate::replay::Transition;
use crate::scenario::mission_env;
use crate::subgoal::GoalPolicy;

/// Sign pair of a displacement, `-1`, `0` or `1` per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Heading {
    pub dx: i32,
    pub dy: i32,
}

impl Heading {
    pub fn between(from: GridPos, to: GridPos) -> Self {
        Heading {
            dx: (to.x - from.x).signum(),
            dy: (to.y - from.y).signum(),
        }
    }

    pub fn opposite(self) -> Self {
        Heading { dx: -self.dx, dy: -self.dy }
    }

    /// True when `to` lies strictly along this heading from `from` on every
    /// non-zero axis.
    pub fn contains(self, from: GridPos, to: GridPos) -> bool {
        let h = Heading::between(from, to);
        (self.dx == 0 || h.dx == self.dx) && (self.dy == 0 || h.dy == self.dy) && from != to
    }
}

/// Net heading of a corpus of episodes: the sign of the summed per-step
/// displacement on each axis.
pub fn corpus_heading(episodes: &[Vec<Transition>]) -> Heading {
    let (mut sx, mut sy) = (0i64, 0i64);
    for tr in episodes.iter().flatten().filter(|t| !t.stage_change) {
        sx += (tr.pos_next.x - tr.pos.x) as i64;
        sy += (tr.pos_next.y - tr.pos.y) as i64;
    }
    Heading {
        dx: sx.signum() as i32,
        dy: sy.signum() as i32,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub trials: usize,
    /// Step allowance as a multiple of the BFS distance.
    pub slack: f64,
    pub seed: u64,
    pub stage: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            trials: 200,
            slack: 2.0,
            seed: 0,
            stage: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub start: GridPos,
    pub goal: GridPos,
    pub distance: u32,
    /// Steps taken when reached.
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadrantRate {
    pub heading: Heading,
    pub trials: usize,
    pub reached: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub trials: usize,
    pub reached: usize,
    pub rate: f64,
    pub quadrants: Vec<QuadrantRate>,
    pub results: Vec<Trial>,
}

impl ProbeReport {
    /// Reach rate over trials whose goal satisfies `pred`; `None` when no
    /// trial does.
    pub fn rate_where(&self, pred: impl Fn(&Trial) -> bool) -> Option<(usize, usize)> {
        let sel: Vec<&Trial> = self.results.iter().filter(|t| pred(t)).collect();
        (!sel.is_empty()).then(|| (sel.iter().filter(|t| t.steps.is_some()).count(), sel.len()))
    }
}

/// Samples `cfg.trials` (start, goal) pairs of distinct, connected free
/// cells accepted by `accept`, and rolls `policy` out greedily from each
/// start for at most `slack * distance` steps.
pub fn reach_probe(
    env: &Environment,
    policy: &dyn GoalPolicy,
    cfg: &ProbeConfig,
    accept: &dyn Fn(GridPos, GridPos) -> bool,
) -> Result<ProbeReport> {
    if cfg.trials == 0 || cfg.slack <= 0.0 {
        return Err(Error::usage("probe needs trials > 0 and slack > 0"));
    }
    let layout = env.layout(cfg.stage);
    let free: Vec<GridPos> = layout.free_cells().collect();
    let mut pairs = Vec::with_capacity(cfg.trials);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let max_draws = cfg.trials * 10_000;
    for _ in 0..max_draws {
        if pairs.len() == cfg.trials {
            break;
        }
        let s = free[rng.gen_range(0..free.len())];
        let g = free[rng.gen_range(0..free.len())];
        if s == g || !accept(s, g) {
            continue;
        }
        if let Some(d) = layout.distance(s, g) {
            pairs.push((s, g, d));
        }
    }
    if pairs.len() < cfg.trials {
        return Err(Error::usage("goal filter accepts too few (start, goal) pairs"));
    }
    let horizon = (cfg.slack * (free.len() as f64)).ceil() as usize * 4 + 1;
    let env = mission_env(env, horizon);
    let mut results = Vec::with_capacity(cfg.trials);
    for (s, g, d) in pairs {
        let mut state = EnvState {
            pos: s,
            stage: cfg.stage,
            ..env.reset()
        };
        let limit = (cfg.slack * d as f64).floor() as usize;
        let mut steps = None;
        for k in 0..limit {
            let a = policy.goal_action(&env, &state, g, true, &mut rng)?;
            let out = env.step(&state, a)?;
            state = out.next;
            if out.entered == g {
                steps = Some(k + 1);
                break;
            }
            if out.done || state.stage != cfg.stage {
                break;
            }
        }
        results.push(Trial {
            start: s,
            goal: g,
            distance: d,
            steps,
        });
    }
    let mut quadrants: Vec<QuadrantRate> = Vec::new();
    for t in &results {
        let h = Heading::between(t.start, t.goal);
        let q = match quadrants.iter_mut().find(|q| q.heading == h) {
            Some(q) => q,
            None => {
                quadrants.push(QuadrantRate { heading: h, trials: 0, reached: 0 });
                quadrants.last_mut().unwrap()
            }
        };
        q.trials += 1;
        q.reached += t.steps.is_some() as usize;
    }
    quadrants.sort_by_key(|q| (q.heading.dy, q.heading.dx));
    let reached = results.iter().filter(|t| t.steps.is_some()).count();
    Ok(ProbeReport {
        trials: results.len(),
        reached,
        rate: reached as f64 / results.len() as f64,
        quadrants,
        results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Action, Event};
    use crate::scenario::BfsOracle;
    use rand::RngCore;

    #[test]
    fn oracle_reaches_everything_at_slack_one() {
        let env = Environment::default_key_door();
        let cfg = ProbeConfig { trials: 50, slack: 1.0, seed: 3, stage: 2 };
        let r = reach_probe(&env, &BfsOracle, &cfg, &|_, _| true).unwrap();
        assert_eq!(r.reached, 50);
        assert!(r.results.iter().all(|t| t.steps == Some(t.distance as usize)));
        assert_eq!(r.quadrants.iter().map(|q| q.trials).sum::<usize>(), 50);
    }

    struct OnlyLeft;
    impl GoalPolicy for OnlyLeft {
        fn goal_action(&self, _: &Environment, _: &EnvState, _: GridPos, _: bool, _: &mut dyn RngCore) -> Result<Action> {
            Ok(Action::Left)
        }
    }

    #[test]
    fn filters_select_the_requested_direction() {
        let env = Environment::default_simple();
        let right = Heading { dx: 1, dy: 0 };
        let cfg = ProbeConfig { trials: 40, ..ProbeConfig::default() };
        let r = reach_probe(&env, &OnlyLeft, &cfg, &|s, g| right.contains(s, g)).unwrap();
        assert!(r.results.iter().all(|t| t.goal.x > t.start.x));
        assert_eq!(r.reached, 0);
        let left = reach_probe(&env, &OnlyLeft, &cfg, &|s, g| g.y == s.y && g.x < s.x).unwrap();
        assert_eq!(left.reached, 40);
        assert_eq!(left.rate_where(|t| t.distance > 0), Some((40, 40)));
    }

    #[test]
    fn impossible_filters_are_reported() {
        let env = Environment::default_simple();
        let cfg = ProbeConfig { trials: 5, ..ProbeConfig::default() };
        assert!(reach_probe(&env, &BfsOracle, &cfg, &|_, _| false).is_err());
    }

    #[test]
    fn heading_of_a_corpus_is_its_net_displacement() {
        let mk = |a: GridPos, b: GridPos| Transition {
            s: vec![],
            a: Action::Left,
            r: 0.0,
            bonus: 0.0,
            s_next: vec![],
            done: false,
            pos: a,
            pos_next: b,
            stage: 1,
            has_bonus: false,
            has_bonus_next: false,
            event: Event::None,
            stage_change: false,
        };
        let ep = vec![
            mk(GridPos::new(5, 5), GridPos::new(4, 5)),
            mk(GridPos::new(4, 5), GridPos::new(4, 4)),
            mk(GridPos::new(4, 4), GridPos::new(5, 4)),
            mk(GridPos::new(5, 4), GridPos::new(4, 4)),
        ];
        let h = corpus_heading(&[ep]);
        assert_eq!(h, Heading { dx: -1, dy: -1 });
        assert_eq!(h.opposite(), Heading { dx: 1, dy: 1 });
        assert!(h.opposite().contains(GridPos::new(0, 0), GridPos::new(3, 2)));
        assert!(!h.opposite().contains(GridPos::new(0, 0), GridPos::new(3, 0)));
    }
}
