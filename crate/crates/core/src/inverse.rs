//! Inverse dynamics model: given an ordered pair of adjacent states, predict
//! the action that moves the first onto the second.
//!
//! Trained on forward pairs `(s_t, s_{t+1}) -> a_t`. Reverse trajectories
//! query it with the arguments swapped, `(s_{t+1}, s_t)`, to obtain the
//! action that undoes `a_t`.

use std::collections::VecDeque;

use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::Action;
use crate::neural::{argmax, log_softmax, Activation, Adam, Gradients, Head, Mlp};
use crate::replay::Transition;

pub const DEFAULT_INVERSE_LR: f64 = 3e-3;
pub const DEFAULT_INVERSE_BATCH: usize = 64;
pub const DEFAULT_INVERSE_FIFO: usize = 2048;
/// Predictions below this probability are reported as low confidence.
pub const LOW_CONFIDENCE: f64 = 0.5;

/// One supervised example.
#[derive(Debug, Clone, PartialEq)]
pub struct InversePair {
    pub from: Vec<f64>,
    pub to: Vec<f64>,
    pub action: Action,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InversePrediction {
    pub action: Action,
    pub confidence: f64,
}

impl InversePrediction {
    pub fn low_confidence(&self) -> bool {
        self.confidence < LOW_CONFIDENCE
    }
}

#[derive(Debug, Clone)]
pub struct InverseModel {
    net: Mlp,
    opt: Adam,
    state_dim: usize,
    fifo: VecDeque<InversePair>,
    fifo_capacity: usize,
    pub batch: usize,
    steps: u64,
}

impl InverseModel {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, hidden: &[usize], lr: f64, rng: &mut R) -> Result<Self> {
        let mut sizes = vec![2 * state_dim];
        sizes.extend(hidden);
        sizes.push(Action::COUNT);
        let net = Mlp::new(&sizes, Activation::Tanh, Head::Softmax, 0.1, rng)?;
        Ok(Self::from_network(net, lr))
    }

    pub fn from_network(net: Mlp, lr: f64) -> Self {
        let opt = Adam::new(&net, lr);
        InverseModel {
            state_dim: net.input_dim() / 2,
            net,
            opt,
            fifo: VecDeque::new(),
            fifo_capacity: DEFAULT_INVERSE_FIFO,
            batch: DEFAULT_INVERSE_BATCH,
            steps: 0,
        }
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    /// Number of optimizer steps taken so far.
    pub fn trained_steps(&self) -> u64 {
        self.steps
    }

    pub fn is_trained(&self) -> bool {
        self.steps > 0
    }

    fn input(&self, from: &[f64], to: &[f64]) -> Result<Vec<f64>> {
        if from.len() != self.state_dim || to.len() != self.state_dim {
            return Err(Error::usage(format!(
                "inverse model expects states of width {}",
                self.state_dim
            )));
        }
        let mut x = Vec::with_capacity(2 * self.state_dim);
        x.extend_from_slice(from);
        x.extend_from_slice(to);
        Ok(x)
    }

    /// Cross-entropy over a batch and its gradient.
    pub fn loss_and_gradients(&self, batch: &[&InversePair]) -> Result<(f64, Gradients)> {
        if batch.is_empty() {
            return Err(Error::usage("empty inverse-model batch"));
        }
        let n = batch.len() as f64;
        let mut g = Gradients::zeros_like(&self.net);
        let mut loss = 0.0;
        for pair in batch {
            let tr = self.net.forward_trace(&self.input(&pair.from, &pair.to)?)?;
            let a = pair.action.index();
            loss -= log_softmax(&tr.logits)[a];
            let d: Vec<f64> = tr
                .output
                .iter()
                .enumerate()
                .map(|(k, p)| p - if k == a { 1.0 } else { 0.0 })
                .collect();
            self.net.accumulate_logits(&tr, &d, 1.0 / n, &mut g)?;
        }
        Ok((loss / n, g))
    }

    pub fn loss(&self, batch: &[&InversePair]) -> Result<f64> {
        Ok(self.loss_and_gradients(batch)?.0)
    }

    /// One cross-entropy step; returns the pre-update batch loss.
    pub fn train_step(&mut self, batch: &[&InversePair]) -> Result<f64> {
        let (loss, g) = self.loss_and_gradients(batch)?;
        self.opt.step(&mut self.net, &g)?;
        self.steps += 1;
        Ok(loss)
    }

    /// Records a real transition for online training. Blocked moves and
    /// stage changes are skipped: neither has a distinguishable inverse.
    pub fn observe(&mut self, tr: &Transition) {
        if tr.blocked() || tr.stage_change {
            return;
        }
        if self.fifo.len() == self.fifo_capacity {
            self.fifo.pop_front();
        }
        self.fifo.push_back(InversePair {
            from: tr.s.clone(),
            to: tr.s_next.clone(),
            action: tr.a,
        });
    }

    pub fn pending(&self) -> usize {
        self.fifo.len()
    }

    /// One step on a minibatch drawn from recently observed transitions.
    pub fn train_online<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Option<f64>> {
        if self.fifo.is_empty() {
            return Ok(None);
        }
        let idx: Vec<usize> = (0..self.batch).map(|_| rng.gen_range(0..self.fifo.len())).collect();
        let pairs: Vec<InversePair> = idx.into_iter().map(|i| self.fifo[i].clone()).collect();
        let refs: Vec<&InversePair> = pairs.iter().collect();
        self.train_step(&refs).map(Some)
    }

    /// Predicts the action that moves `from` onto `to`.
    pub fn predict(&self, from: &[f64], to: &[f64]) -> Result<InversePrediction> {
        let p = self.net.forward(&self.input(from, to)?)?;
        let i = argmax(&p);
        Ok(InversePrediction {
            action: Action::from_index(i).unwrap(),
            confidence: p[i],
        })
    }

    /// The action transporting `s_next` back to `s`: the forward-trained
    /// model queried with the pair reversed.
    pub fn predict_inverse(&self, s_next: &[f64], s: &[f64]) -> Result<InversePrediction> {
        self.predict(s_next, s)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.net.save(path)
    }

    pub fn load(path: &std::path::Path, lr: f64) -> Result<Self> {
        let net = Mlp::load(path)?;
        if net.input_dim() % 2 != 0 || net.output_dim() != Action::COUNT {
            return Err(Error::Format("not an inverse-model checkpoint".into()));
        }
        let mut m = InverseModel::from_network(net, lr);
        // A loaded model counts as trained.
        m.steps = 1;
        Ok(m)
    }
}
