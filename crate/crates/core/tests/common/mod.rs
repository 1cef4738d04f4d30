#![allow(dead_code)]

use disem::agent::{AgentConfig, AgentNet, Scheme};
use disem::autodiff::{Tape, Tensor, Var};
use disem::env::{EnvSpec, Setting, Task};
use disem::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-6;

/// `|a - n| / max(1, |a|, |n|)`: relative for large gradients, absolute near
/// zero where a ratio would only measure rounding noise.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

/// One op under test: input shapes, whether inputs must be positive, and the
/// graph built from them.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: &'static [(usize, usize)],
    pub positive: bool,
    pub build: Build,
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "matmul", shapes: &[(3, 4), (4, 2)], positive: false, build: |t, v| t.matmul(v[0], v[1]) },
        OpCase { name: "add", shapes: &[(2, 3), (2, 3)], positive: false, build: |t, v| t.add(v[0], v[1]) },
        OpCase { name: "sub", shapes: &[(2, 3), (2, 3)], positive: false, build: |t, v| t.sub(v[0], v[1]) },
        OpCase { name: "mul", shapes: &[(2, 3), (2, 3)], positive: false, build: |t, v| t.mul(v[0], v[1]) },
        OpCase { name: "add_bias", shapes: &[(3, 4), (1, 4)], positive: false, build: |t, v| t.add_bias(v[0], v[1]) },
        OpCase { name: "mul_scalar", shapes: &[(2, 3), (1, 1)], positive: false, build: |t, v| t.mul_scalar(v[0], v[1]) },
        OpCase { name: "scale", shapes: &[(2, 3)], positive: false, build: |t, v| Ok(t.scale(v[0], -1.7)) },
        OpCase { name: "add_const", shapes: &[(2, 3)], positive: false, build: |t, v| Ok(t.add_const(v[0], 0.3)) },
        OpCase { name: "squash", shapes: &[(2, 3)], positive: false, build: |t, v| Ok(t.squash(v[0])) },
        OpCase { name: "sigmoid", shapes: &[(2, 3)], positive: false, build: |t, v| Ok(t.sigmoid(v[0])) },
        OpCase { name: "softmax", shapes: &[(3, 4)], positive: false, build: |t, v| Ok(t.softmax(v[0])) },
        OpCase { name: "log_softmax", shapes: &[(3, 4)], positive: false, build: |t, v| Ok(t.log_softmax(v[0])) },
        OpCase { name: "log2", shapes: &[(2, 3)], positive: true, build: |t, v| Ok(t.log2(v[0])) },
        OpCase {
            name: "concat_cols",
            shapes: &[(2, 3), (2, 1), (2, 2)],
            positive: false,
            build: |t, v| t.concat_cols(v),
        },
        OpCase {
            name: "concat_rows",
            shapes: &[(1, 3), (2, 3), (1, 3)],
            positive: false,
            build: |t, v| t.concat_rows(v),
        },
        OpCase { name: "transpose", shapes: &[(2, 3)], positive: false, build: |t, v| Ok(t.transpose(v[0])) },
        OpCase { name: "sum", shapes: &[(3, 2)], positive: false, build: |t, v| Ok(t.sum(v[0])) },
        OpCase { name: "mean", shapes: &[(3, 2)], positive: false, build: |t, v| Ok(t.mean(v[0])) },
        OpCase { name: "pick", shapes: &[(3, 2)], positive: false, build: |t, v| t.pick(v[0], 4) },
        OpCase {
            name: "column_variance",
            shapes: &[(4, 3)],
            positive: false,
            build: |t, v| Ok(t.column_variance(v[0])),
        },
        OpCase {
            name: "rnn_cell",
            shapes: &[(1, 3), (1, 2), (3, 2), (2, 2), (1, 2)],
            positive: false,
            build: |t, v| t.rnn_cell(v[0], v[1], v[2], v[3], v[4]),
        },
    ]
}

fn random_tensor(rng: &mut ChaCha8Rng, (r, c): (usize, usize), positive: bool) -> Tensor {
    let data = (0..r * c)
        .map(|_| if positive { rng.random_range(0.2..3.0) } else { rng.random_range(-1.5..1.5) })
        .collect();
    Tensor::new(r, c, data).unwrap()
}

/// `Σ out ⊙ w` for a fixed random projection `w`, so every output entry
/// contributes to the checked scalar.
fn project(tape: &mut Tape, out: Var, w: &Tensor) -> Var {
    let w = tape.leaf(w.clone());
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

fn eval_case(case: &OpCase, inputs: &[Tensor], w: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    let loss = project(&mut tape, out, w);
    tape.value(loss).as_scalar().unwrap()
}

/// Largest relative error over every input entry of one random instance.
pub fn check_op(case: &OpCase, rng: &mut ChaCha8Rng) -> f64 {
    let inputs: Vec<Tensor> = case.shapes.iter().map(|&s| random_tensor(rng, s, case.positive)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = (case.build)(&mut tape, &vars).unwrap();
    let w = random_tensor(rng, tape.value(out).shape(), false);
    let loss = project(&mut tape, out, &w);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&inputs)
        .map(|(&v, x)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]))
        .collect();

    let mut worst: f64 = 0.0;
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let n = (eval_case(case, &plus, &w) - eval_case(case, &minus, &w)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(a, n));
        }
    }
    worst
}

/// Small team run for a few steps: policy log-probabilities, projected
/// messages and an injected message gradient all feed the checked scalar.
pub struct NetInstance {
    pub net: AgentNet,
    obs: Vec<Vec<Vec<f64>>>,
    actions: Vec<Vec<usize>>,
    msg_weights: Vec<Vec<Tensor>>,
    injected: Vec<Vec<Vec<f64>>>,
}

const STEPS: usize = 3;

impl NetInstance {
    pub fn random(scheme: Scheme, share_params: bool, rng: &mut ChaCha8Rng) -> Self {
        let mut spec = EnvSpec::new(Task::PredatorPrey, Setting::A);
        spec.n_agents = 3;
        let config = AgentConfig {
            scheme,
            hidden: 5,
            msg_len: 3,
            share_params,
            straight_through: false,
        };
        let net = AgentNet::new(&config, &spec, rng).unwrap();
        let n = spec.n_agents;
        let obs = (0..STEPS)
            .map(|_| (0..n).map(|_| (0..net.obs_dim()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
            .collect();
        let actions = (0..STEPS).map(|_| (0..n).map(|_| rng.random_range(0..net.n_actions())).collect()).collect();
        let msg_weights = (0..STEPS)
            .map(|_| (0..n).map(|_| random_tensor(rng, (1, config.msg_len), false)).collect())
            .collect();
        let injected = (0..STEPS)
            .map(|_| (0..n).map(|_| (0..config.msg_len).map(|_| rng.random_range(-0.5..0.5)).collect()).collect())
            .collect();
        NetInstance {
            net,
            obs,
            actions,
            msg_weights,
            injected,
        }
    }

    /// Records the rollout on `tape`. With `inject`, the message gradients
    /// are injected; otherwise they are added to the loss as `<g, m>` so
    /// both forms describe the same objective.
    fn record(&self, tape: &mut Tape, inject: bool) -> Var {
        let net = &self.net;
        let bound = net.bind(tape);
        let n = net.n_agents();
        let mut hidden: Vec<Var> = (0..n).map(|_| net.zero_hidden(tape)).collect();
        let mut prev: Vec<Option<(Var, Var)>> = vec![None; n];
        let mut terms = Vec::new();
        for t in 0..STEPS {
            let mut next = Vec::with_capacity(n);
            let mut new_hidden = Vec::with_capacity(n);
            for (i, &h) in hidden.iter().enumerate() {
                let senders: Vec<(Var, Var)> = (0..n).filter(|&j| j != i).filter_map(|j| prev[j]).collect();
                let received = net.aggregate(tape, &bound, i, h, &senders).unwrap();
                let s = net.step(tape, &bound, i, &self.obs[t][i], received, h).unwrap();
                let logp = tape.log_softmax(s.logits);
                terms.push(tape.pick(logp, self.actions[t][i]).unwrap());
                terms.push(project(tape, s.message, &self.msg_weights[t][i]));
                if inject {
                    tape.inject_gradient(s.message, &self.injected[t][i]).unwrap();
                } else {
                    let g = Tensor::row(self.injected[t][i].clone());
                    terms.push(project(tape, s.message, &g));
                }
                next.push(Some((s.message, s.aux)));
                new_hidden.push(s.hidden);
            }
            prev = next;
            hidden = new_hidden;
        }
        let all = tape.concat_cols(&terms).unwrap();
        tape.sum(all)
    }

    fn loss(&self) -> f64 {
        let mut tape = Tape::new();
        let l = self.record(&mut tape, false);
        tape.value(l).as_scalar().unwrap()
    }

    /// Largest relative error over every parameter entry.
    pub fn check(&mut self) -> f64 {
        let mut tape = Tape::new();
        let l = self.record(&mut tape, true);
        tape.backward(l).unwrap();
        let analytic: Vec<f64> = tape.param_gradients(self.net.params()).values().collect();
        let mut worst: f64 = 0.0;
        for (k, &a) in analytic.iter().enumerate() {
            let x = self.net.params().values().nth(k).unwrap();
            *self.net.params_mut().values_mut().nth(k).unwrap() = x + FD_STEP;
            let up = self.loss();
            *self.net.params_mut().values_mut().nth(k).unwrap() = x - FD_STEP;
            let down = self.loss();
            *self.net.params_mut().values_mut().nth(k).unwrap() = x;
            worst = worst.max(rel_err(a, (up - down) / (2.0 * FD_STEP)));
        }
        worst
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
