//! A small fully connected network with hand-written backpropagation and an
//! Adam optimizer. Every learned component in the crate (policy, value,
//! sub-goal, inverse and RND networks) is one of these.
//!
//! Weights are initialized uniformly in `[-sqrt(3/fan_in), sqrt(3/fan_in)]`
//! (unit-variance pre-activations for unit-variance inputs), biases at zero.
//! The output layer is additionally multiplied by `output_scale`.

use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Linear,
    Softmax,
}

/// A dense layer; `w` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            w: vec![0.0; inputs * outputs],
            b: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.b);
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.w[j * self.inputs..(j + 1) * self.inputs];
            *o += row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    hidden: Activation,
    head: Head,
    layers: Vec<Dense>,
}

/// Cached activations of one forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input followed by each hidden layer's post-activation.
    inputs: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub output: Vec<f64>,
}

/// Parameter gradients, shaped like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Gradients {
            layers: net.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.iter_mut().zip(&b.w).for_each(|(x, y)| *x += scale * y);
            a.b.iter_mut().zip(&b.b).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.w.iter_mut().for_each(|x| *x *= s);
            l.b.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.w.iter().chain(&l.b).copied())
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(f64::is_finite)
    }

    pub fn is_zero(&self) -> bool {
        self.iter().all(|g| g == 0.0)
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

impl Mlp {
    /// `sizes` lists every layer width, input first and output last.
    pub fn new<R: Rng + ?Sized>(
        sizes: &[usize],
        hidden: Activation,
        head: Head,
        output_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut net = Mlp::zeros(sizes, hidden, head)?;
        let n = net.layers.len();
        for (i, layer) in net.layers.iter_mut().enumerate() {
            let limit = (3.0 / layer.inputs as f64).sqrt();
            let scale = if i + 1 == n { output_scale } else { 1.0 };
            for w in &mut layer.w {
                *w = rng.gen_range(-limit..=limit) * scale;
            }
        }
        Ok(net)
    }

    pub fn zeros(sizes: &[usize], hidden: Activation, head: Head) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::usage("a network needs at least input and output widths"));
        }
        if sizes.contains(&0) {
            return Err(Error::usage("layer widths must be positive"));
        }
        Ok(Mlp {
            sizes: sizes.to_vec(),
            hidden,
            head,
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.w.iter().chain(&l.b).copied())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers.iter_mut().flat_map(|l| l.w.iter_mut().chain(l.b.iter_mut()))
    }

    /// Bitwise fingerprint of all parameters.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for p in self.params() {
            p.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::usage(format!(
                "input has {} features, network expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn activate(&self, v: &mut [f64]) {
        match self.hidden {
            Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut next);
            if i < last {
                self.activate(&mut next);
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(match self.head {
            Head::Linear => cur,
            Head::Softmax => softmax(&cur),
        })
    }

    /// Raw pre-head outputs (logits for a softmax head).
    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.logits)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        inputs.push(x.to_vec());
        let last = self.layers.len() - 1;
        let mut logits = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.apply(inputs.last().unwrap(), &mut out);
            if i < last {
                self.activate(&mut out);
                inputs.push(out);
            } else {
                logits = out;
            }
        }
        let output = match self.head {
            Head::Linear => logits.clone(),
            Head::Softmax => softmax(&logits),
        };
        Ok(Trace {
            inputs,
            logits,
            output,
        })
    }

    fn check_trace(&self, trace: &Trace, grad_len: usize) -> Result<()> {
        if trace.inputs.len() != self.layers.len()
            || trace.inputs[0].len() != self.input_dim()
            || trace.logits.len() != self.output_dim()
        {
            return Err(Error::usage("trace was not produced by this network"));
        }
        if grad_len != self.output_dim() {
            return Err(Error::usage(format!(
                "output gradient has {grad_len} entries, network outputs {}",
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Gradients of a scalar loss given dL/d(output), where output is the
    /// head's result (probabilities for a softmax head).
    pub fn backward(&self, trace: &Trace, grad_output: &[f64]) -> Result<Gradients> {
        self.check_trace(trace, grad_output.len())?;
        let dlogits = match self.head {
            Head::Linear => grad_output.to_vec(),
            Head::Softmax => {
                let p = &trace.output;
                let dot: f64 = p.iter().zip(grad_output).map(|(p, g)| p * g).sum();
                p.iter().zip(grad_output).map(|(p, g)| p * (g - dot)).collect()
            }
        };
        let mut grads = Gradients::zeros_like(self);
        self.accumulate_logits(trace, &dlogits, 1.0, &mut grads)?;
        Ok(grads)
    }

    /// Adds `scale * dL/dθ` into `grads`, given dL/d(logits).
    pub fn accumulate_logits(
        &self,
        trace: &Trace,
        grad_logits: &[f64],
        scale: f64,
        grads: &mut Gradients,
    ) -> Result<()> {
        self.check_trace(trace, grad_logits.len())?;
        let mut delta: Vec<f64> = grad_logits.iter().map(|g| g * scale).collect();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let x = &trace.inputs[li];
            let g = &mut grads.layers[li];
            for (j, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.b[j] += d;
                let row = &mut g.w[j * layer.inputs..(j + 1) * layer.inputs];
                row.iter_mut().zip(x).for_each(|(gw, xi)| *gw += d * xi);
            }
            if li == 0 {
                break;
            }
            let mut prev = vec![0.0; layer.inputs];
            for (j, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &layer.w[j * layer.inputs..(j + 1) * layer.inputs];
                prev.iter_mut().zip(row).for_each(|(p, w)| *p += w * d);
            }
            // x is the post-activation of the previous hidden layer.
            match self.hidden {
                Activation::Tanh => prev.iter_mut().zip(x).for_each(|(p, h)| *p *= 1.0 - h * h),
                Activation::Relu => prev.iter_mut().zip(x).for_each(|(p, h)| {
                    if *h <= 0.0 {
                        *p = 0.0
                    }
                }),
            }
            delta = prev;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = CheckpointRef {
            version: CHECKPOINT_VERSION,
            net: self,
        };
        std::fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Mlp::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("bad checkpoint: {e}")))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", ck.version)));
        }
        ck.net.validate()?;
        Ok(ck.net)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let ok = self.sizes.len() >= 2
            && self.layers.len() == self.sizes.len() - 1
            && self.layers.iter().zip(self.sizes.windows(2)).all(|(l, w)| {
                l.inputs == w[0]
                    && l.outputs == w[1]
                    && l.w.len() == w[0] * w[1]
                    && l.b.len() == w[1]
            })
            && self.params().all(f64::is_finite);
        if ok {
            Ok(())
        } else {
            Err(Error::Format("checkpoint shapes are inconsistent".into()))
        }
    }
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    version: u32,
    net: &'a Mlp,
}

#[derive(Deserialize)]
struct Checkpoint {
    version: u32,
    net: Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepStatus {
    Applied,
    SkippedNonFinite,
}

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_grad_norm: Option<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        let n = net.param_count();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn with_max_grad_norm(mut self, n: f64) -> Self {
        self.max_grad_norm = Some(n);
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) -> Result<StepStatus> {
        if self.m.len() != net.param_count()
            || grads.layers.len() != net.layers.len()
            || grads.layers.iter().zip(&net.layers).any(|(g, l)| g.w.len() != l.w.len())
        {
            return Err(Error::usage("gradient shape does not match the network"));
        }
        if !grads.is_finite() {
            log::warn!("skipping optimizer step: non-finite gradient");
            return Ok(StepStatus::SkippedNonFinite);
        }
        let clip = match self.max_grad_norm {
            Some(max) => {
                let n = grads.norm();
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in net
            .params_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            let g = g * clip;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(StepStatus::Applied)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite difference of `loss` w.r.t. every parameter.
    pub(crate) fn numeric_grad(net: &Mlp, loss: impl Fn(&Mlp) -> f64, eps: f64) -> Vec<f64> {
        let n = net.param_count();
        let mut out = Vec::with_capacity(n);
        let mut probe = net.clone();
        for i in 0..n {
            let orig = probe.params().nth(i).unwrap();
            *probe.params_mut().nth(i).unwrap() = orig + eps;
            let up = loss(&probe);
            *probe.params_mut().nth(i).unwrap() = orig - eps;
            let down = loss(&probe);
            *probe.params_mut().nth(i).unwrap() = orig;
            out.push((up - down) / (2.0 * eps));
        }
        out
    }

    pub(crate) fn max_rel_err(analytic: impl Iterator<Item = f64>, numeric: &[f64]) -> f64 {
        analytic
            .zip(numeric)
            .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_net_outputs() {
        let soft = Mlp::zeros(&[3, 5, 4], Activation::Tanh, Head::Softmax).unwrap();
        assert_eq!(soft.forward(&[1.0, 2.0, 3.0]).unwrap(), vec![0.25; 4]);
        let lin = Mlp::zeros(&[3, 5, 1], Activation::Tanh, Head::Linear).unwrap();
        assert_eq!(lin.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0]);
        assert!(matches!(lin.forward(&[1.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn seeded_init_is_bitwise_stable() {
        let make = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            Mlp::new(&[4, 16, 16, 4], Activation::Tanh, Head::Softmax, 1.0, &mut rng).unwrap()
        };
        let x = [0.1, -0.3, 0.7, 0.2];
        let a = make().forward(&x).unwrap();
        let b = make().forward(&x).unwrap();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn finite_difference_agreement_8_16_4() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (hidden, head) in [
            (Activation::Tanh, Head::Softmax),
            (Activation::Tanh, Head::Linear),
            (Activation::Relu, Head::Linear),
        ] {
            let net = Mlp::new(&[8, 16, 4], hidden, head, 1.0, &mut rng).unwrap();
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // loss = sum_k c_k * out_k^2
            let loss = |n: &Mlp| {
                n.forward(&x).unwrap().iter().zip(&c).map(|(o, c)| c * o * o).sum::<f64>()
            };
            let trace = net.forward_trace(&x).unwrap();
            let g_out: Vec<f64> = trace.output.iter().zip(&c).map(|(o, c)| 2.0 * c * o).collect();
            let grads = net.backward(&trace, &g_out).unwrap();
            let numeric = numeric_grad(&net, loss, 1e-5);
            let err = max_rel_err(grads.iter(), &numeric);
            assert!(err < 1e-4, "{hidden:?}/{head:?}: rel err {err}");
        }
    }

    #[test]
    fn softmax_cross_entropy_logit_gradient_is_p_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(&[5, 8, 4], Activation::Tanh, Head::Softmax, 1.0, &mut rng).unwrap();
        let x = [0.3, -0.2, 0.5, 0.9, -0.4];
        let target = 2;
        let trace = net.forward_trace(&x).unwrap();
        // Numeric d(-log p_target)/d(logit_k) by perturbing logits directly.
        let eps = 1e-6;
        for k in 0..4 {
            let mut up = trace.logits.clone();
            up[k] += eps;
            let mut dn = trace.logits.clone();
            dn[k] -= eps;
            let numeric = (-log_softmax(&up)[target] + log_softmax(&dn)[target]) / (2.0 * eps);
            let analytic = trace.output[k] - if k == target { 1.0 } else { 0.0 };
            assert!((numeric - analytic).abs() < 1e-7, "k={k}: {numeric} vs {analytic}");
        }
        // And through backward(): dL/dp = -1/p at the target.
        let mut g_out = vec![0.0; 4];
        g_out[target] = -1.0 / trace.output[target];
        let via_probs = net.backward(&trace, &g_out).unwrap();
        let dlogits: Vec<f64> = (0..4)
            .map(|k| trace.output[k] - if k == target { 1.0 } else { 0.0 })
            .collect();
        let mut via_logits = Gradients::zeros_like(&net);
        net.accumulate_logits(&trace, &dlogits, 1.0, &mut via_logits).unwrap();
        let err = max_rel_err(via_probs.iter(), &via_logits.iter().collect::<Vec<_>>());
        assert!(err < 1e-9);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(&[3, 6, 2], Activation::Tanh, Head::Linear, 1.0, &mut rng).unwrap();
        let trace = net.forward_trace(&[0.1, 0.2, 0.3]).unwrap();
        assert!(net.backward(&trace, &[0.0, 0.0]).unwrap().is_zero());
        assert!(net.backward(&trace, &[0.0]).is_err());
    }

    #[test]
    fn optimizer_null_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Mlp::new(&[2, 4, 1], Activation::Tanh, Head::Linear, 1.0, &mut rng).unwrap();
        let before = net.clone();
        let mut adam = Adam::new(&net, 1e-2);
        adam.step(&mut net, &Gradients::zeros_like(&before)).unwrap();
        assert_eq!(net, before);
        assert_eq!(adam.steps(), 1);

        let trace = net.forward_trace(&[0.5, 0.5]).unwrap();
        let g = net.backward(&trace, &[1.0]).unwrap();
        let mut frozen = Adam::new(&net, 0.0);
        frozen.step(&mut net, &g).unwrap();
        assert_eq!(net, before);

        let mut bad = g.clone();
        bad.layers[0].w[0] = f64::NAN;
        let mut adam = Adam::new(&net, 1e-2);
        assert_eq!(adam.step(&mut net, &bad).unwrap(), StepStatus::SkippedNonFinite);
        assert_eq!(net, before);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // A 1-1 linear net with zero weight: output = bias; minimize (bias-3)^2.
        let mut net = Mlp::zeros(&[1, 1], Activation::Tanh, Head::Linear).unwrap();
        let mut adam = Adam::new(&net, 1e-2);
        for _ in 0..10_000 {
            let trace = net.forward_trace(&[0.0]).unwrap();
            let x = trace.output[0];
            let g = net.backward(&trace, &[2.0 * (x - 3.0)]).unwrap();
            adam.step(&mut net, &g).unwrap();
        }
        let x = net.forward(&[0.0]).unwrap()[0];
        assert!((x - 3.0).abs() < 1e-3, "{x}");
    }

    #[test]
    fn supervised_loss_decreases_over_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = Mlp::new(&[2, 16, 1], Activation::Tanh, Head::Linear, 1.0, &mut rng).unwrap();
        let mut adam = Adam::new(&net, 1e-2);
        let data: Vec<([f64; 2], f64)> = (0..32)
            .map(|_| {
                let x: [f64; 2] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                (x, (x[0] * 2.0).sin() + x[1])
            })
            .collect();
        let mut windows = Vec::new();
        let mut acc = 0.0;
        for step in 1..=2000 {
            let mut g = Gradients::zeros_like(&net);
            let mut loss = 0.0;
            for (x, y) in &data {
                let tr = net.forward_trace(x).unwrap();
                let e = tr.output[0] - y;
                loss += 0.5 * e * e / data.len() as f64;
                net.accumulate_logits(&tr, &[e], 1.0 / data.len() as f64, &mut g).unwrap();
            }
            adam.step(&mut net, &g).unwrap();
            acc += loss;
            if step % 400 == 0 {
                windows.push(acc / 400.0);
                acc = 0.0;
            }
        }
        assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(&[3, 8, 4], Activation::Tanh, Head::Softmax, 1.0, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.save(&path).unwrap();
        assert_eq!(Mlp::load(&path).unwrap(), net);
        std::fs::write(&path, "{\"version\":1,\"net\":{\"sizes\":[3,4]").unwrap();
        assert!(matches!(Mlp::load(&path), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn finite_inputs_give_finite_outputs_and_grads(
            seed in 0u64..1000,
            x in prop::collection::vec(-1e3f64..1e3, 6),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = Mlp::new(&[6, 12, 12, 4], Activation::Tanh, Head::Softmax, 1.0, &mut rng).unwrap();
            let tr = net.forward_trace(&x).unwrap();
            prop_assert!(tr.output.iter().all(|v| v.is_finite()));
            prop_assert!((tr.output.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let g = net.backward(&tr, &[1.0, -1.0, 0.5, 0.0]).unwrap();
            prop_assert!(g.is_finite());
        }
    }
}
