//! Experience records, discounted returns and FIFO replay memories.
//!
//! Snapshot format (little-endian throughout):
//!
//! ```text
//! magic   [u8; 4]  "WPRB"
//! version u16      1
//! kind    u8       1 = return transitions, 2 = goal transitions
//! capacity u64
//! count   u64
//! records ...      see `Record::write`
//! ```
//! Feature vectors are written as a `u32` length followed by `f64`s.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Action, Event, GridPos};

pub const DEFAULT_RETURN_CAPACITY: usize = 100_000;
pub const DEFAULT_GOAL_CAPACITY: usize = 400_000;

const MAGIC: &[u8; 4] = b"WPRB";
const SNAPSHOT_VERSION: u16 = 1;

/// One environment step as observed during collection.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Action,
    /// Extrinsic reward plus exploration bonus.
    pub r: f64,
    pub bonus: f64,
    pub s_next: Vec<f64>,
    pub done: bool,
    pub pos: GridPos,
    /// The cell entered (the door cell on a stage transition).
    pub pos_next: GridPos,
    pub stage: usize,
    pub has_bonus: bool,
    pub has_bonus_next: bool,
    pub event: Event,
    /// The step cleared a stage and moved the agent to the next one.
    pub stage_change: bool,
}

impl Transition {
    pub fn blocked(&self) -> bool {
        self.event == Event::Blocked
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnTransition {
    pub s: Vec<f64>,
    pub a: Action,
    pub ret: f64,
}

/// A goal-relabeled step. `sg` and `sg_next` end with the same goal slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalTransition {
    pub sg: Vec<f64>,
    pub a: Action,
    /// Shaped reach reward credited to the relabeled segment starting here.
    pub r_shaped: f64,
    pub sg_next: Vec<f64>,
    /// This step lands on the goal.
    pub done_g: bool,
    /// Steps taken along the trajectory from this state to the goal.
    pub steps_to_goal: u32,
    /// Discounted return of the relabeled segment, terminated at the goal.
    pub ret: f64,
}

/// Anything that can be replayed by the self-imitation objective.
pub trait SilSample {
    fn input(&self) -> &[f64];
    fn action(&self) -> Action;
    fn target_return(&self) -> f64;
}

impl SilSample for ReturnTransition {
    fn input(&self) -> &[f64] {
        &self.s
    }
    fn action(&self) -> Action {
        self.a
    }
    fn target_return(&self) -> f64 {
        self.ret
    }
}

impl SilSample for GoalTransition {
    fn input(&self) -> &[f64] {
        &self.sg
    }
    fn action(&self) -> Action {
        self.a
    }
    fn target_return(&self) -> f64 {
        self.ret
    }
}

/// Backward recursion `R_t = r_t + gamma * R_{t+1}`, `R_T = r_T`.
pub fn compute_returns(episode: &[Transition], gamma: f64) -> Result<Vec<ReturnTransition>> {
    if episode.is_empty() {
        return Err(Error::usage("cannot compute returns of an empty episode"));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::usage(format!("gamma {gamma} outside [0, 1)")));
    }
    let mut out: Vec<ReturnTransition> = Vec::with_capacity(episode.len());
    let mut acc = 0.0;
    for tr in episode.iter().rev() {
        acc = tr.r + gamma * acc;
        out.push(ReturnTransition {
            s: tr.s.clone(),
            a: tr.a,
            ret: acc,
        });
    }
    out.reverse();
    Ok(out)
}

/// Bounded FIFO memory with seeded uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: VecDeque<T>,
    rng: ChaCha8Rng,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("capacity", "must be positive"));
        }
        Ok(ReplayBuffer {
            capacity,
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, items: impl IntoIterator<Item = T>) {
        for item in items {
            if self.items.len() == self.capacity {
                self.items.pop_front();
            }
            self.items.push_back(item);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    pub fn clear(&mut self) {
        self.items.clear();
    }

    /// `n` uniform draws with replacement.
    pub fn sample(&mut self, n: usize) -> Result<Vec<&T>> {
        if self.items.is_empty() {
            return Err(Error::usage("cannot sample from an empty buffer"));
        }
        let len = self.items.len();
        let idx: Vec<usize> = (0..n).map(|_| self.rng.gen_range(0..len)).collect();
        Ok(idx.into_iter().map(|i| &self.items[i]).collect())
    }
}

/// Binary record encoding used by buffer snapshots.
pub trait Record: Sized {
    const KIND: u8;
    fn write(&self, w: &mut impl Write) -> std::io::Result<()>;
    fn read(r: &mut impl Read) -> Result<Self>;
}

fn write_vec(w: &mut impl Write, v: &[f64]) -> std::io::Result<()> {
    w.write_all(&(v.len() as u32).to_le_bytes())?;
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated snapshot: {e}")))?;
    Ok(b)
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_array(r)?))
}

fn read_vec(r: &mut impl Read) -> Result<Vec<f64>> {
    let n = u32::from_le_bytes(read_array(r)?) as usize;
    if n > 1 << 20 {
        return Err(Error::Format(format!("implausible feature width {n}")));
    }
    (0..n).map(|_| read_f64(r)).collect()
}

fn read_action(r: &mut impl Read) -> Result<Action> {
    let [a] = read_array::<1>(r)?;
    Action::from_index(a as usize).ok_or_else(|| Error::Format(format!("bad action index {a}")))
}

impl Record for ReturnTransition {
    const KIND: u8 = 1;

    /// `s`, action `u8`, `ret` f64.
    fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_vec(w, &self.s)?;
        w.write_all(&[self.a.index() as u8])?;
        w.write_all(&self.ret.to_le_bytes())
    }

    fn read(r: &mut impl Read) -> Result<Self> {
        Ok(ReturnTransition {
            s: read_vec(r)?,
            a: read_action(r)?,
            ret: read_f64(r)?,
        })
    }
}

impl Record for GoalTransition {
    const KIND: u8 = 2;

    /// `sg`, action `u8`, `r_shaped` f64, `sg_next`, `done_g` u8,
    /// `steps_to_goal` u32, `ret` f64.
    fn write(&self, w: &mut impl Write) -> std::io::Result<()> {
        write_vec(w, &self.sg)?;
        w.write_all(&[self.a.index() as u8])?;
        w.write_all(&self.r_shaped.to_le_bytes())?;
        write_vec(w, &self.sg_next)?;
        w.write_all(&[self.done_g as u8])?;
        w.write_all(&self.steps_to_goal.to_le_bytes())?;
        w.write_all(&self.ret.to_le_bytes())
    }

    fn read(r: &mut impl Read) -> Result<Self> {
        Ok(GoalTransition {
            sg: read_vec(r)?,
            a: read_action(r)?,
            r_shaped: read_f64(r)?,
            sg_next: read_vec(r)?,
            done_g: read_array::<1>(r)?[0] != 0,
            steps_to_goal: u32::from_le_bytes(read_array(r)?),
            ret: read_f64(r)?,
        })
    }
}

impl<T: Record> ReplayBuffer<T> {
    pub fn write_snapshot(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
        w.write_all(&[T::KIND])?;
        w.write_all(&(self.capacity as u64).to_le_bytes())?;
        w.write_all(&(self.items.len() as u64).to_le_bytes())?;
        for item in &self.items {
            item.write(w)?;
        }
        Ok(())
    }

    /// Restores contents and capacity; sampling continues from `seed`.
    pub fn read_snapshot(r: &mut impl Read, seed: u64) -> Result<Self> {
        if &read_array::<4>(r)? != MAGIC {
            return Err(Error::Format("not a replay snapshot".into()));
        }
        let version = u16::from_le_bytes(read_array(r)?);
        if version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!("unsupported snapshot version {version}")));
        }
        let [kind] = read_array::<1>(r)?;
        if kind != T::KIND {
            return Err(Error::Format(format!("snapshot holds record kind {kind}, expected {}", T::KIND)));
        }
        let capacity = u64::from_le_bytes(read_array(r)?) as usize;
        let count = u64::from_le_bytes(read_array(r)?) as usize;
        if count > capacity {
            return Err(Error::Format("snapshot count exceeds capacity".into()));
        }
        let mut buf = ReplayBuffer::new(capacity, seed)?;
        for _ in 0..count {
            let item = T::read(r)?;
            buf.push(std::iter::once(item));
        }
        Ok(buf)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tr(r: f64) -> Transition {
        Transition {
            s: vec![0.0, 0.0],
            a: Action::Up,
            r,
            bonus: 0.0,
            s_next: vec![0.0, 0.0],
            done: false,
            pos: GridPos::new(0, 0),
            pos_next: GridPos::new(0, 0),
            stage: 1,
            has_bonus: false,
            has_bonus_next: false,
            event: Event::None,
            stage_change: false,
        }
    }

    #[test]
    fn returns_examples() {
        let ep: Vec<_> = [0.0, 0.0, 30.0].into_iter().map(tr).collect();
        let r: Vec<f64> = compute_returns(&ep, 0.99).unwrap().iter().map(|t| t.ret).collect();
        // Hand recursion: 30, 0.99*30, 0.99*29.7
        let expected = [29.403, 29.7, 30.0];
        for (a, b) in r.iter().zip(expected) {
            assert!((a - b).abs() < 1e-9, "{r:?}");
        }
        let ep: Vec<_> = [1.0, -2.0, 3.0].into_iter().map(tr).collect();
        let r: Vec<f64> = compute_returns(&ep, 0.0).unwrap().iter().map(|t| t.ret).collect();
        assert_eq!(r, vec![1.0, -2.0, 3.0]);
        let ep: Vec<_> = [0.0; 5].into_iter().map(tr).collect();
        assert!(compute_returns(&ep, 0.9).unwrap().iter().all(|t| t.ret == 0.0));
        assert!(compute_returns(&[], 0.9).is_err());
    }

    #[test]
    fn fifo_eviction() {
        let mut b = ReplayBuffer::new(3, 0).unwrap();
        b.push([1, 2, 3, 4]);
        assert_eq!(b.iter().copied().collect::<Vec<_>>(), vec![2, 3, 4]);
        b.push(std::iter::empty());
        assert_eq!(b.len(), 3);
    }

    #[test]
    fn sampling_contracts() {
        let mut b = ReplayBuffer::new(4, 0).unwrap();
        assert!(b.sample(1).is_err());
        b.push([42]);
        assert_eq!(b.sample(5).unwrap(), vec![&42; 5]);

        let draw = |seed| {
            let mut b = ReplayBuffer::new(10, seed).unwrap();
            b.push(0..10);
            b.sample(50).unwrap().into_iter().copied().collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn sampling_is_uniform() {
        let mut b = ReplayBuffer::new(10, 123).unwrap();
        b.push(0..10usize);
        let mut counts = [0usize; 10];
        for i in b.sample(100_000).unwrap() {
            counts[*i] += 1;
        }
        for c in counts {
            let f = c as f64 / 1e5;
            assert!((f - 0.1).abs() < 0.01, "{counts:?}");
        }
    }

    #[test]
    fn snapshot_round_trip_and_rejects_garbage() {
        let mut b = ReplayBuffer::new(8, 1).unwrap();
        b.push((0..5).map(|i| GoalTransition {
            sg: vec![i as f64, 0.5, 0.25, 1.0],
            a: Action::ALL[i % 4],
            r_shaped: 1.0 - i as f64,
            sg_next: vec![0.1, 0.2, 0.25, 1.0],
            done_g: i % 2 == 0,
            steps_to_goal: i as u32 + 1,
            ret: 0.5,
        }));
        let mut bytes = Vec::new();
        b.write_snapshot(&mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"WPRB");
        let back: ReplayBuffer<GoalTransition> =
            ReplayBuffer::read_snapshot(&mut bytes.as_slice(), 1).unwrap();
        assert_eq!(back.capacity(), 8);
        assert!(back.iter().eq(b.iter()));

        let wrong_kind = ReplayBuffer::<ReturnTransition>::read_snapshot(&mut bytes.as_slice(), 1);
        assert!(matches!(wrong_kind, Err(Error::Format(_))));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(ReplayBuffer::<GoalTransition>::read_snapshot(&mut &truncated[..], 1).is_err());
    }

    proptest! {
        #[test]
        fn return_recursion_holds(rs in prop::collection::vec(-50.0f64..50.0, 1..60), gamma in 0.0f64..0.999) {
            let ep: Vec<_> = rs.iter().copied().map(tr).collect();
            let out = compute_returns(&ep, gamma).unwrap();
            prop_assert_eq!(out.len(), rs.len());
            prop_assert!((out.last().unwrap().ret - rs[rs.len() - 1]).abs() < 1e-12);
            for t in 0..rs.len() - 1 {
                prop_assert!((out[t].ret - (rs[t] + gamma * out[t + 1].ret)).abs() < 1e-9);
            }
        }

        #[test]
        fn size_is_bounded(cap in 1usize..20, n in 0usize..100) {
            let mut b = ReplayBuffer::new(cap, 0).unwrap();
            b.push(0..n);
            prop_assert_eq!(b.len(), n.min(cap));
            if n > 0 {
                prop_assert_eq!(*b.iter().last().unwrap(), n - 1);
            }
        }
    }
}
