//! Actor-critic agent with a self-imitation objective and a random network
//! distillation exploration bonus.
//!
//! Self-imitation loss per sample, with `A = max(R - V(s), 0)`:
//!
//! ```text
//! L_policy = -log pi(a|s) * A      (A is a constant weight here)
//! L_value  = 0.5 * A^2
//! L        = mean(L_policy + beta * L_value)
//! ```
//!
//! Samples whose return does not exceed the current value estimate
//! contribute nothing, neither loss nor gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Action;
use crate::neural::{argmax, log_softmax, Activation, Adam, Gradients, Head, Mlp, StepStatus};
use crate::parallel::Exec;
use crate::replay::{ReturnTransition, SilSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub lr: f64,
    /// Critic learning rate; `None` uses `beta * lr`. Adam normalizes each
    /// network's gradient scale away, so the value weight acts through the
    /// step size instead.
    pub value_lr: Option<f64>,
    /// Weight of the value term.
    pub beta: f64,
    pub max_grad_norm: Option<f64>,
    /// Weight of the on-policy actor-critic update; 0 disables it.
    pub actor_critic_weight: f64,
    pub entropy_coef: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            hidden: vec![64, 64],
            activation: Activation::Tanh,
            lr: 3e-4,
            value_lr: None,
            beta: 0.01,
            max_grad_norm: Some(10.0),
            actor_critic_weight: 0.0,
            entropy_coef: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AsilAgent {
    pub policy: Mlp,
    pub value: Mlp,
    policy_opt: Adam,
    value_opt: Adam,
    pub cfg: AgentConfig,
}

/// Loss value and gradients of one self-imitation minibatch.
#[derive(Debug, Clone)]
pub struct SilOutput {
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    /// Fraction of samples with `R > V(s)`.
    pub active: f64,
    pub policy_grads: Gradients,
    pub value_grads: Gradients,
}

struct SilAcc {
    policy_loss: f64,
    value_loss: f64,
    active: usize,
    pg: Gradients,
    vg: Gradients,
}

// Batches smaller than this are cheaper to run on one thread.
const PARALLEL_BATCH_MIN: usize = 256;
const GRAD_CHUNK: usize = 32;

impl AsilAgent {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, cfg: AgentConfig, rng: &mut R) -> Result<Self> {
        if !cfg.beta.is_finite() || cfg.beta < 0.0 {
            return Err(Error::config("beta", "must be finite and non-negative"));
        }
        let mut sizes = vec![input_dim];
        sizes.extend(&cfg.hidden);
        let mut psizes = sizes.clone();
        psizes.push(Action::COUNT);
        sizes.push(1);
        let policy = Mlp::new(&psizes, cfg.activation, Head::Softmax, 0.01, rng)?;
        let value = Mlp::new(&sizes, cfg.activation, Head::Linear, 0.01, rng)?;
        Ok(Self::from_networks(policy, value, cfg))
    }

    pub fn from_networks(policy: Mlp, value: Mlp, cfg: AgentConfig) -> Self {
        let mut policy_opt = Adam::new(&policy, cfg.lr);
        let mut value_opt = Adam::new(&value, cfg.value_lr.unwrap_or(cfg.beta * cfg.lr));
        if let Some(n) = cfg.max_grad_norm {
            policy_opt = policy_opt.with_max_grad_norm(n);
            value_opt = value_opt.with_max_grad_norm(n);
        }
        AsilAgent {
            policy,
            value,
            policy_opt,
            value_opt,
            cfg,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.policy.input_dim()
    }

    pub fn probabilities(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.policy.forward(s)
    }

    pub fn value_of(&self, s: &[f64]) -> Result<f64> {
        Ok(self.value.forward(s)?[0])
    }

    /// Samples an action (or takes the argmax when `greedy`) and returns its
    /// log-probability.
    pub fn act<R: Rng + ?Sized>(&self, s: &[f64], greedy: bool, rng: &mut R) -> Result<(Action, f64)> {
        let logits = self.policy.logits(s)?;
        let logp = log_softmax(&logits);
        let i = if greedy {
            argmax(&logits)
        } else {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = Action::COUNT - 1;
            for (i, lp) in logp.iter().enumerate() {
                acc += lp.exp();
                if u < acc {
                    pick = i;
                    break;
                }
            }
            pick
        };
        Ok((Action::from_index(i).unwrap(), logp[i]))
    }

    fn sil_sample<T: SilSample>(&self, acc: &mut SilAcc, x: &T) -> Result<()> {
        let vt = self.value.forward_trace(x.input())?;
        let adv = x.target_return() - vt.output[0];
        if adv <= 0.0 {
            return Ok(());
        }
        let pt = self.policy.forward_trace(x.input())?;
        let a = x.action().index();
        let logp = log_softmax(&pt.logits)[a];
        acc.policy_loss += -logp * adv;
        acc.value_loss += 0.5 * adv * adv;
        acc.active += 1;
        let dlogits: Vec<f64> = pt
            .output
            .iter()
            .enumerate()
            .map(|(k, p)| adv * (p - if k == a { 1.0 } else { 0.0 }))
            .collect();
        self.policy.accumulate_logits(&pt, &dlogits, 1.0, &mut acc.pg)?;
        self.value.accumulate_logits(&vt, &[-adv], self.cfg.beta, &mut acc.vg)?;
        Ok(())
    }

    /// Self-imitation loss and gradients over a minibatch.
    pub fn sil_loss<T: SilSample + Sync>(&self, batch: &[&T], exec: Exec) -> Result<SilOutput> {
        if batch.is_empty() {
            return Err(Error::usage("empty self-imitation batch"));
        }
        for x in batch {
            if x.input().len() != self.input_dim() {
                return Err(Error::usage(format!(
                    "sample has {} features, agent expects {}",
                    x.input().len(),
                    self.input_dim()
                )));
            }
        }
        let exec = if batch.len() >= PARALLEL_BATCH_MIN { exec } else { Exec::Sequential };
        let init = || SilAcc {
            policy_loss: 0.0,
            value_loss: 0.0,
            active: 0,
            pg: Gradients::zeros_like(&self.policy),
            vg: Gradients::zeros_like(&self.value),
        };
        let acc = exec.fold_chunks(
            batch,
            GRAD_CHUNK,
            init,
            // Dimensions were checked above, so the per-sample calls cannot fail.
            |acc, x| self.sil_sample(acc, *x).expect("dimension-checked sample"),
            |mut a, b| {
                a.policy_loss += b.policy_loss;
                a.value_loss += b.value_loss;
                a.active += b.active;
                a.pg.add_scaled(&b.pg, 1.0);
                a.vg.add_scaled(&b.vg, 1.0);
                a
            },
        );
        let n = batch.len() as f64;
        let mut pg = acc.pg;
        let mut vg = acc.vg;
        pg.scale(1.0 / n);
        vg.scale(1.0 / n);
        let policy_loss = acc.policy_loss / n;
        let value_loss = acc.value_loss / n;
        Ok(SilOutput {
            loss: policy_loss + self.cfg.beta * value_loss,
            policy_loss,
            value_loss,
            active: acc.active as f64 / n,
            policy_grads: pg,
            value_grads: vg,
        })
    }

    /// One optimizer step on the self-imitation objective.
    pub fn sil_update<T: SilSample + Sync>(&mut self, batch: &[&T], exec: Exec) -> Result<SilOutput> {
        let out = self.sil_loss(batch, exec)?;
        if out.active > 0.0 {
            self.apply(&out.policy_grads, &out.value_grads)?;
        }
        Ok(out)
    }

    fn apply(&mut self, pg: &Gradients, vg: &Gradients) -> Result<()> {
        if self.policy_opt.step(&mut self.policy, pg)? == StepStatus::SkippedNonFinite
            || self.value_opt.step(&mut self.value, vg)? == StepStatus::SkippedNonFinite
        {
            log::warn!("agent update skipped a non-finite gradient");
        }
        Ok(())
    }

    /// On-policy actor-critic step on a finished episode's returns:
    /// `-log pi(a|s) * (R - V(s)) + 0.5 (R - V(s))^2 - entropy_coef * H`,
    /// scaled by `actor_critic_weight`.
    pub fn actor_critic_update(&mut self, episode: &[ReturnTransition]) -> Result<f64> {
        let w = self.cfg.actor_critic_weight;
        if w == 0.0 || episode.is_empty() {
            return Ok(0.0);
        }
        let mut pg = Gradients::zeros_like(&self.policy);
        let mut vg = Gradients::zeros_like(&self.value);
        let n = episode.len() as f64;
        let mut loss = 0.0;
        for x in episode {
            let vt = self.value.forward_trace(&x.s)?;
            let adv = x.ret - vt.output[0];
            let pt = self.policy.forward_trace(&x.s)?;
            let lp = log_softmax(&pt.logits);
            let a = x.a.index();
            let entropy: f64 = -pt.output.iter().zip(&lp).map(|(p, l)| p * l).sum::<f64>();
            loss += -lp[a] * adv + 0.5 * adv * adv - self.cfg.entropy_coef * entropy;
            let dlogits: Vec<f64> = (0..Action::COUNT)
                .map(|k| {
                    let p = pt.output[k];
                    adv * (p - if k == a { 1.0 } else { 0.0 })
                        + self.cfg.entropy_coef * p * (lp[k] + entropy)
                })
                .collect();
            self.policy.accumulate_logits(&pt, &dlogits, w / n, &mut pg)?;
            self.value.accumulate_logits(&vt, &[-adv], w / n, &mut vg)?;
        }
        self.apply(&pg, &vg)?;
        Ok(w * loss / n)
    }
}

#[derive(Serialize)]
struct AgentCheckpointRef<'a> {
    version: u32,
    kind: &'a str,
    config: &'a AgentConfig,
    policy: &'a Mlp,
    value: &'a Mlp,
}

#[derive(Deserialize)]
struct AgentCheckpoint {
    version: u32,
    kind: String,
    config: AgentConfig,
    policy: Mlp,
    value: Mlp,
}

impl AsilAgent {
    pub fn save(&self, path: &std::path::Path, kind: &str) -> Result<()> {
        let ck = AgentCheckpointRef {
            version: crate::neural::CHECKPOINT_VERSION,
            kind,
            config: &self.cfg,
            policy: &self.policy,
            value: &self.value,
        };
        std::fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    /// Loads a checkpoint written by `save`, checking its kind tag.
    pub fn load(path: &std::path::Path, kind: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: AgentCheckpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("bad agent checkpoint {}: {e}", path.display())))?;
        if ck.version != crate::neural::CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", ck.version)));
        }
        if ck.kind != kind {
            return Err(Error::Format(format!("checkpoint holds a {} agent, expected {kind}", ck.kind)));
        }
        ck.policy.validate()?;
        ck.value.validate()?;
        let (policy, value) = (ck.policy, ck.value);
        if policy.input_dim() != value.input_dim() || policy.output_dim() != Action::COUNT || value.output_dim() != 1 {
            return Err(Error::Format("agent checkpoint has inconsistent networks".into()));
        }
        Ok(AsilAgent::from_networks(policy, value, ck.config))
    }
}

/// Random network distillation: a frozen random target and a trained
/// predictor; the bonus is the scaled mean squared prediction error.
#[derive(Debug, Clone)]
pub struct RndPair {
    target: Mlp,
    predictor: Mlp,
    opt: Adam,
    pub scale: f64,
}

pub const RND_OUTPUT: usize = 32;

impl RndPair {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, scale: f64, lr: f64, rng: &mut R) -> Result<Self> {
        if !scale.is_finite() || scale < 0.0 {
            return Err(Error::config("rnd_scale", "must be finite and non-negative"));
        }
        let sizes = [input_dim, 64, RND_OUTPUT];
        let target = Mlp::new(&sizes, Activation::Tanh, Head::Linear, 1.0, rng)?;
        let predictor = Mlp::new(&sizes, Activation::Tanh, Head::Linear, 1.0, rng)?;
        Ok(Self::from_networks(target, predictor, scale, lr))
    }

    pub fn from_networks(target: Mlp, predictor: Mlp, scale: f64, lr: f64) -> Self {
        let opt = Adam::new(&predictor, lr);
        RndPair {
            target,
            predictor,
            opt,
            scale,
        }
    }

    pub fn target(&self) -> &Mlp {
        &self.target
    }

    pub fn predictor(&self) -> &Mlp {
        &self.predictor
    }

    fn error(&self, s: &[f64]) -> Result<f64> {
        let t = self.target.forward(s)?;
        let p = self.predictor.forward(s)?;
        Ok(t.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64)
    }

    pub fn bonus(&self, s: &[f64]) -> Result<f64> {
        if self.scale == 0.0 {
            return Ok(0.0);
        }
        Ok(self.scale * self.error(s)?)
    }

    /// Predictor loss (unscaled mean squared error) over a batch.
    pub fn loss(&self, batch: &[&[f64]]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::usage("empty RND batch"));
        }
        let mut total = 0.0;
        for s in batch {
            total += self.error(s)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Gradient of `loss` w.r.t. the predictor parameters.
    pub fn predictor_gradients(&self, batch: &[&[f64]]) -> Result<Gradients> {
        if batch.is_empty() {
            return Err(Error::usage("empty RND batch"));
        }
        let mut g = Gradients::zeros_like(&self.predictor);
        let k = RND_OUTPUT as f64;
        let n = batch.len() as f64;
        for s in batch {
            let t = self.target.forward(s)?;
            let tr = self.predictor.forward_trace(s)?;
            let d: Vec<f64> = tr.output.iter().zip(&t).map(|(p, t)| 2.0 * (p - t) / k).collect();
            self.predictor.accumulate_logits(&tr, &d, 1.0 / n, &mut g)?;
        }
        Ok(g)
    }

    /// One optimizer step of the predictor toward the target's outputs.
    pub fn update(&mut self, batch: &[&[f64]]) -> Result<f64> {
        let g = self.predictor_gradients(batch)?;
        self.opt.step(&mut self.predictor, &g)?;
        self.loss(batch)
    }
}
