//! Recurrent policy over per-layer group-count actions.
//!
//! A single-layer LSTM consumes one input vector per decision step and emits
//! a softmax over the global action set. The controller samples one action
//! per clusterable layer; recurrent state starts at zero for every episode.
//! `episode_grad` backpropagates through the whole unrolled episode and
//! returns the gradient of the summed log-probability of the taken actions,
//! which is the quantity policy-gradient updates scale by the reward.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;
use rand_distr::{Distribution, Normal};

/// Gate rows in the packed `[4 * hidden, _]` matrices, in storage order.
const GATE_INPUT: usize = 0;
const GATE_FORGET: usize = 1;
const GATE_CANDIDATE: usize = 2;
const GATE_OUTPUT: usize = 3;

#[derive(Debug, Clone)]
pub struct PolicyNetwork {
    input_dim: usize,
    hidden_dim: usize,
    actions: usize,
    /// `[4 * hidden, input]`: input projections for the i, f, g, o gates.
    w_x: Tensor,
    /// `[4 * hidden, hidden]`: recurrent projections.
    w_h: Tensor,
    /// `[4 * hidden]`.
    b: Tensor,
    /// `[actions, hidden]`: softmax head.
    w_out: Tensor,
    /// `[actions]`.
    b_out: Tensor,
}

/// Recurrent carry between decision steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

/// Gradients for every policy parameter, same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct PolicyGrads {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub b: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

impl PolicyGrads {
    pub fn zeros_like(policy: &PolicyNetwork) -> Self {
        PolicyGrads {
            w_x: Tensor::zeros_like(&policy.w_x),
            w_h: Tensor::zeros_like(&policy.w_h),
            b: Tensor::zeros_like(&policy.b),
            w_out: Tensor::zeros_like(&policy.w_out),
            b_out: Tensor::zeros_like(&policy.b_out),
        }
    }

    pub fn add_scaled(&mut self, other: &PolicyGrads, scale: f64) {
        self.w_x.add_scaled(&other.w_x, scale);
        self.w_h.add_scaled(&other.w_h, scale);
        self.b.add_scaled(&other.b, scale);
        self.w_out.add_scaled(&other.w_out, scale);
        self.b_out.add_scaled(&other.b_out, scale);
    }

    pub fn scale(&mut self, factor: f64) {
        self.w_x.scale(factor);
        self.w_h.scale(factor);
        self.b.scale(factor);
        self.w_out.scale(factor);
        self.b_out.scale(factor);
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn tensors(&self) -> [&Tensor; 5] {
        [&self.w_x, &self.w_h, &self.b, &self.w_out, &self.b_out]
    }
}

/// Per-step activations retained for backpropagation through time.
struct StepTrace {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
    probs: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

impl PolicyNetwork {
    /// Seeded initialization: weights Normal(0, 1/sqrt(fan-in)), biases zero.
    pub fn new(
        input_dim: usize,
        hidden_dim: usize,
        actions: usize,
        stream: &mut Stream,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || actions == 0 {
            return Err(Error::BadConfig(format!(
                "policy dims must be positive, got input {input_dim}, hidden {hidden_dim}, actions {actions}"
            )));
        }
        let mut init = |rows: usize, cols: usize, fan_in: usize| -> Tensor {
            let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("std > 0");
            let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(stream)).collect();
            Tensor::new(vec![rows, cols], data).expect("init shape")
        };
        Ok(PolicyNetwork {
            input_dim,
            hidden_dim,
            actions,
            w_x: init(4 * hidden_dim, input_dim, input_dim),
            w_h: init(4 * hidden_dim, hidden_dim, hidden_dim),
            b: Tensor::zeros(&[4 * hidden_dim]),
            w_out: init(actions, hidden_dim, hidden_dim),
            b_out: Tensor::zeros(&[actions]),
        })
    }

    pub fn from_parts(
        input_dim: usize,
        hidden_dim: usize,
        actions: usize,
        w_x: Tensor,
        w_h: Tensor,
        b: Tensor,
        w_out: Tensor,
        b_out: Tensor,
    ) -> Result<Self> {
        let checks: [(&Tensor, &[usize], &str); 5] = [
            (&w_x, &[4 * hidden_dim, input_dim], "input weights"),
            (&w_h, &[4 * hidden_dim, hidden_dim], "recurrent weights"),
            (&b, &[4 * hidden_dim], "gate bias"),
            (&w_out, &[actions, hidden_dim], "head weights"),
            (&b_out, &[actions], "head bias"),
        ];
        for (t, want, name) in checks {
            if t.shape() != want {
                return Err(Error::BadConfig(format!(
                    "policy {name}: shape {:?} does not match {:?}",
                    t.shape(),
                    want
                )));
            }
        }
        Ok(PolicyNetwork {
            input_dim,
            hidden_dim,
            actions,
            w_x,
            w_h,
            b,
            w_out,
            b_out,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn num_actions(&self) -> usize {
        self.actions
    }

    pub fn tensors(&self) -> [&Tensor; 5] {
        [&self.w_x, &self.w_h, &self.b, &self.w_out, &self.b_out]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.w_x,
            &mut self.w_h,
            &mut self.b,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn initial_state(&self) -> LstmState {
        LstmState {
            h: vec![0.0; self.hidden_dim],
            c: vec![0.0; self.hidden_dim],
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::BadConfig(format!(
                "policy input has {} elements, expected {}",
                x.len(),
                self.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy input".into()));
        }
        Ok(())
    }

    fn forward_step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> StepTrace {
        let hd = self.hidden_dim;
        let mut z = vec![0.0; 4 * hd];
        let wx = self.w_x.data();
        let wh = self.w_h.data();
        let bias = self.b.data();
        for (r, zr) in z.iter_mut().enumerate() {
            let mut acc = bias[r];
            let xrow = &wx[r * self.input_dim..(r + 1) * self.input_dim];
            for (w, v) in xrow.iter().zip(x.iter()) {
                acc += w * v;
            }
            let hrow = &wh[r * hd..(r + 1) * hd];
            for (w, v) in hrow.iter().zip(h_prev.iter()) {
                acc += w * v;
            }
            *zr = acc;
        }
        let gate = |k: usize| &z[k * hd..(k + 1) * hd];
        let i: Vec<f64> = gate(GATE_INPUT).iter().map(|&v| sigmoid(v)).collect();
        let f: Vec<f64> = gate(GATE_FORGET).iter().map(|&v| sigmoid(v)).collect();
        let g: Vec<f64> = gate(GATE_CANDIDATE).iter().map(|&v| v.tanh()).collect();
        let o: Vec<f64> = gate(GATE_OUTPUT).iter().map(|&v| sigmoid(v)).collect();
        let c: Vec<f64> = (0..hd)
            .map(|j| f[j] * c_prev[j] + i[j] * g[j])
            .collect();
        let tanh_c: Vec<f64> = c.iter().map(|&v| v.tanh()).collect();
        let h: Vec<f64> = (0..hd).map(|j| o[j] * tanh_c[j]).collect();
        let wo = self.w_out.data();
        let bo = self.b_out.data();
        let logits: Vec<f64> = (0..self.actions)
            .map(|a| {
                let row = &wo[a * hd..(a + 1) * hd];
                bo[a] + row.iter().zip(h.iter()).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        let probs = softmax(&logits);
        StepTrace {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            i,
            f,
            g,
            o,
            c,
            tanh_c,
            h,
            probs,
        }
    }

    /// One decision step: action probabilities plus the next carry.
    pub fn step(&self, x: &[f64], state: &LstmState) -> Result<(Vec<f64>, LstmState)> {
        self.check_input(x)?;
        let trace = self.forward_step(x, &state.h, &state.c);
        if trace.probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("policy action distribution".into()));
        }
        Ok((
            trace.probs.clone(),
            LstmState {
                h: trace.h,
                c: trace.c,
            },
        ))
    }

    fn run_episode(&self, inputs: &[Vec<f64>], actions: &[usize]) -> Result<Vec<StepTrace>> {
        if inputs.len() != actions.len() {
            return Err(Error::BadConfig(format!(
                "{} inputs but {} actions in episode",
                inputs.len(),
                actions.len()
            )));
        }
        if inputs.is_empty() {
            return Err(Error::BadConfig("empty episode".into()));
        }
        let mut state = self.initial_state();
        let mut traces = Vec::with_capacity(inputs.len());
        for (x, &a) in inputs.iter().zip(actions.iter()) {
            self.check_input(x)?;
            if a >= self.actions {
                return Err(Error::BadConfig(format!(
                    "action index {a} outside the {} available actions",
                    self.actions
                )));
            }
            let trace = self.forward_step(x, &state.h, &state.c);
            state = LstmState {
                h: trace.h.clone(),
                c: trace.c.clone(),
            };
            traces.push(trace);
        }
        Ok(traces)
    }

    /// Sum over steps of `log P(action_t | inputs up to t)`.
    pub fn episode_log_prob(&self, inputs: &[Vec<f64>], actions: &[usize]) -> Result<f64> {
        let traces = self.run_episode(inputs, actions)?;
        let mut total = 0.0;
        for (trace, &a) in traces.iter().zip(actions.iter()) {
            total += trace.probs[a].ln();
        }
        if !total.is_finite() {
            return Err(Error::NonFinite("episode log-probability".into()));
        }
        Ok(total)
    }

    /// Log-probability of the episode together with its gradient with
    /// respect to every policy parameter, via backpropagation through time.
    pub fn episode_grad(
        &self,
        inputs: &[Vec<f64>],
        actions: &[usize],
    ) -> Result<(f64, PolicyGrads)> {
        let traces = self.run_episode(inputs, actions)?;
        let hd = self.hidden_dim;
        let mut grads = PolicyGrads::zeros_like(self);
        let mut log_prob = 0.0;
        let mut dh = vec![0.0; hd];
        let mut dc = vec![0.0; hd];
        for (t, trace) in traces.iter().enumerate().rev() {
            let a = actions[t];
            log_prob += trace.probs[a].ln();
            // d log p_a / d logits = onehot(a) - probs
            let dlogits: Vec<f64> = (0..self.actions)
                .map(|k| (k == a) as usize as f64 - trace.probs[k])
                .collect();
            {
                let dwo = grads.w_out.data_mut();
                for (k, &dl) in dlogits.iter().enumerate() {
                    for j in 0..hd {
                        dwo[k * hd + j] += dl * trace.h[j];
                    }
                }
                let dbo = grads.b_out.data_mut();
                for (k, &dl) in dlogits.iter().enumerate() {
                    dbo[k] += dl;
                }
            }
            let wo = self.w_out.data();
            for j in 0..hd {
                let mut acc = 0.0;
                for (k, &dl) in dlogits.iter().enumerate() {
                    acc += dl * wo[k * hd + j];
                }
                dh[j] += acc;
            }
            // through h = o * tanh(c)
            let mut dz = vec![0.0; 4 * hd];
            for j in 0..hd {
                let do_ = dh[j] * trace.tanh_c[j];
                dz[GATE_OUTPUT * hd + j] = do_ * trace.o[j] * (1.0 - trace.o[j]);
                dc[j] += dh[j] * trace.o[j] * (1.0 - trace.tanh_c[j] * trace.tanh_c[j]);
            }
            // through c = f * c_prev + i * g
            for j in 0..hd {
                let di = dc[j] * trace.g[j];
                let df = dc[j] * trace.c_prev[j];
                let dg = dc[j] * trace.i[j];
                dz[GATE_INPUT * hd + j] = di * trace.i[j] * (1.0 - trace.i[j]);
                dz[GATE_FORGET * hd + j] = df * trace.f[j] * (1.0 - trace.f[j]);
                dz[GATE_CANDIDATE * hd + j] = dg * (1.0 - trace.g[j] * trace.g[j]);
            }
            {
                let dwx = grads.w_x.data_mut();
                for (r, &dzr) in dz.iter().enumerate() {
                    if dzr == 0.0 {
                        continue;
                    }
                    for (col, &xv) in trace.x.iter().enumerate() {
                        dwx[r * self.input_dim + col] += dzr * xv;
                    }
                }
                let dwh = grads.w_h.data_mut();
                for (r, &dzr) in dz.iter().enumerate() {
                    if dzr == 0.0 {
                        continue;
                    }
                    for (col, &hv) in trace.h_prev.iter().enumerate() {
                        dwh[r * hd + col] += dzr * hv;
                    }
                }
                let db = grads.b.data_mut();
                for (r, &dzr) in dz.iter().enumerate() {
                    db[r] += dzr;
                }
            }
            // carries for the previous step
            let wh = self.w_h.data();
            let mut dh_prev = vec![0.0; hd];
            for (r, &dzr) in dz.iter().enumerate() {
                if dzr == 0.0 {
                    continue;
                }
                let row = &wh[r * hd..(r + 1) * hd];
                for (j, &w) in row.iter().enumerate() {
                    dh_prev[j] += dzr * w;
                }
            }
            for j in 0..hd {
                dc[j] *= trace.f[j];
            }
            dh = dh_prev;
        }
        if !log_prob.is_finite() || !grads.all_finite() {
            return Err(Error::NonFinite("policy gradient".into()));
        }
        Ok((log_prob, grads))
    }

    /// Plain gradient-ascent step on an objective whose gradient is `grads`.
    pub fn ascend(&mut self, grads: &PolicyGrads, lr: f64) -> Result<()> {
        if !lr.is_finite() || lr <= 0.0 {
            return Err(Error::BadConfig(format!(
                "policy learning rate must be finite and > 0, got {lr}"
            )));
        }
        if !grads.all_finite() {
            return Err(Error::NonFinite("policy gradients before update".into()));
        }
        for (p, g) in self.tensors_mut().into_iter().zip(grads.tensors()) {
            p.add_scaled(g, lr);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn small_policy(seed: u64) -> PolicyNetwork {
        let mut stream = rng::stream(seed, "policy.test");
        PolicyNetwork::new(4, 3, 3, &mut stream).unwrap()
    }

    fn random_inputs(policy: &PolicyNetwork, steps: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut stream = rng::stream(seed, "policy.inputs");
        (0..steps)
            .map(|_| {
                (0..policy.input_dim())
                    .map(|_| stream.random::<f64>() * 2.0 - 1.0)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn step_is_a_distribution() {
        let policy = small_policy(1);
        let inputs = random_inputs(&policy, 1, 7);
        let (probs, next) = policy.step(&inputs[0], &policy.initial_state()).unwrap();
        assert_eq!(probs.len(), 3);
        assert!(probs.iter().all(|&p| p > 0.0));
        let sum: f64 = probs.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert_ne!(next.h, vec![0.0; 3]);
    }

    #[test]
    fn state_carries_information() {
        let policy = small_policy(2);
        let inputs = random_inputs(&policy, 2, 9);
        let s0 = policy.initial_state();
        let (_, s1) = policy.step(&inputs[0], &s0).unwrap();
        let (p_fresh, _) = policy.step(&inputs[1], &s0).unwrap();
        let (p_carried, _) = policy.step(&inputs[1], &s1).unwrap();
        assert_ne!(p_fresh, p_carried);
    }

    #[test]
    fn seeded_construction_is_deterministic() {
        let a = small_policy(5);
        let b = small_policy(5);
        for (ta, tb) in a.tensors().iter().zip(b.tensors().iter()) {
            assert_eq!(ta.data(), tb.data());
        }
        assert_eq!(a.initial_state().h, vec![0.0; 3]);
        assert_eq!(a.initial_state().c, vec![0.0; 3]);
    }

    #[test]
    fn log_prob_matches_stepwise_product() {
        let policy = small_policy(3);
        let inputs = random_inputs(&policy, 4, 11);
        let actions = [0usize, 2, 1, 1];
        let total = policy.episode_log_prob(&inputs, &actions).unwrap();
        let mut state = policy.initial_state();
        let mut manual = 0.0;
        for (x, &a) in inputs.iter().zip(actions.iter()) {
            let (probs, next) = policy.step(x, &state).unwrap();
            manual += probs[a].ln();
            state = next;
        }
        assert!((total - manual).abs() < 1e-12);
    }

    #[test]
    fn episode_grad_matches_finite_differences() {
        let mut policy = small_policy(4);
        let inputs = random_inputs(&policy, 3, 13);
        let actions = [1usize, 0, 2];
        let (logp, grads) = policy.episode_grad(&inputs, &actions).unwrap();
        let direct = policy.episode_log_prob(&inputs, &actions).unwrap();
        assert!((logp - direct).abs() < 1e-12);
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for ti in 0..5 {
            for idx in 0..policy.tensors()[ti].len() {
                let original = policy.tensors()[ti].data()[idx];
                policy.tensors_mut()[ti].data_mut()[idx] = original + eps;
                let up = policy.episode_log_prob(&inputs, &actions).unwrap();
                policy.tensors_mut()[ti].data_mut()[idx] = original - eps;
                let down = policy.episode_log_prob(&inputs, &actions).unwrap();
                policy.tensors_mut()[ti].data_mut()[idx] = original;
                let numeric = (up - down) / (2.0 * eps);
                let analytic = grads.tensors()[ti].data()[idx];
                let denom = numeric.abs().max(1e-8);
                worst = worst.max((analytic - numeric).abs() / denom);
            }
        }
        assert!(worst < 1e-6, "max relative error {worst}");
    }

    #[test]
    fn gradient_rejects_out_of_range_action() {
        let policy = small_policy(6);
        let inputs = random_inputs(&policy, 1, 15);
        assert!(matches!(
            policy.episode_grad(&inputs, &[5]),
            Err(Error::BadConfig(_))
        ));
        assert!(matches!(
            policy.episode_grad(&inputs, &[]),
            Err(Error::BadConfig(_))
        ));
    }

    #[test]
    fn ascend_moves_toward_higher_log_prob() {
        let mut policy = small_policy(7);
        let inputs = random_inputs(&policy, 3, 17);
        let actions = [2usize, 2, 2];
        let before = policy.episode_log_prob(&inputs, &actions).unwrap();
        for _ in 0..50 {
            let (_, grads) = policy.episode_grad(&inputs, &actions).unwrap();
            policy.ascend(&grads, 0.1).unwrap();
        }
        let after = policy.episode_log_prob(&inputs, &actions).unwrap();
        assert!(after > before + 0.5, "log-prob {before} -> {after}");
    }

    #[test]
    fn from_parts_checks_shapes() {
        let policy = small_policy(8);
        let [wx, wh, b, wo, bo] = policy.tensors();
        let bad = PolicyNetwork::from_parts(
            4,
            3,
            3,
            wh.clone(), // transposed roles
            wx.clone(),
            b.clone(),
            wo.clone(),
            bo.clone(),
        );
        assert!(bad.is_err());
        let ok = PolicyNetwork::from_parts(
            4,
            3,
            3,
            wx.clone(),
            wh.clone(),
            b.clone(),
            wo.clone(),
            bo.clone(),
        );
        assert!(ok.is_ok());
    }
}
