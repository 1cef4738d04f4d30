//! Recurrent communicating agents.
//!
//! Each agent runs one recurrent step per environment step on its
//! observation and on an aggregate of the messages the other agents sent on
//! the previous step. From the new hidden state it emits action logits and a
//! message squashed into `(-1, 1)`.
//!
//! Two aggregation schemes are provided. `Ic3netLike` lets every sender
//! scale its message by a learned sigmoid gate and averages the gated
//! messages. `TarmacLike` has receivers attend over senders with a
//! single-head dot product between a receiver query and sender keys.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, ParameterSet, Tape, Tensor, Var};
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::quantization::Quantizer;

/// Width of attention keys and queries.
pub const KEY_SIZE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Ic3netLike,
    TarmacLike,
}

impl Scheme {
    pub fn short(self) -> &'static str {
        match self {
            Scheme::Ic3netLike => "IC3NET",
            Scheme::TarmacLike => "TARMAC",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Ic3netLike => "ic3net_like",
            Scheme::TarmacLike => "tarmac_like",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ic3net_like" | "ic3net" | "gated" => Ok(Scheme::Ic3netLike),
            "tarmac_like" | "tarmac" | "attention" => Ok(Scheme::TarmacLike),
            _ => Err(Error::Config(format!("unknown scheme {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub scheme: Scheme,
    pub hidden: usize,
    pub msg_len: usize,
    /// One parameter set for the whole team instead of one per agent.
    pub share_params: bool,
    /// Deliver quantized messages during training, passing gradients
    /// straight through the quantizer.
    pub straight_through: bool,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            scheme: Scheme::Ic3netLike,
            hidden: 64,
            msg_len: 16,
            share_params: true,
            straight_through: false,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.msg_len == 0 {
            return Err(Error::Config(format!(
                "hidden ({}) and msg_len ({}) must be positive",
                self.hidden, self.msg_len
            )));
        }
        Ok(())
    }
}

/// How a receiver weighs the messages it gets.
#[derive(Clone, Copy, Debug)]
pub enum Aggregation<'a> {
    /// One gate in `[0, 1]` per sender.
    GatedMean(&'a [f64]),
    /// One key per sender and the receiver's query.
    Attention { keys: &'a [Vec<f64>], query: &'a [f64] },
}

/// Softmax over scaled query-key dot products.
pub fn attention_weights(keys: &[Vec<f64>], query: &[f64]) -> Result<Vec<f64>> {
    let scale = 1.0 / (query.len().max(1) as f64).sqrt();
    let mut w = keys
        .iter()
        .map(|k| {
            if k.len() != query.len() {
                return Err(Error::Shape(format!("key of {} against query of {}", k.len(), query.len())));
            }
            Ok(scale * k.iter().zip(query).map(|(a, b)| a * b).sum::<f64>())
        })
        .collect::<Result<Vec<_>>>()?;
    softmax_in_place(&mut w);
    Ok(w)
}

/// Combines received messages into one vector of length `len`. With nothing
/// received the result is zero.
pub fn aggregate(received: &[Vec<f64>], how: Aggregation<'_>, len: usize) -> Result<Vec<f64>> {
    if let Some(m) = received.iter().find(|m| m.len() != len) {
        return Err(Error::Shape(format!("message of {} values, expected {len}", m.len())));
    }
    let mut out = vec![0.0; len];
    if received.is_empty() {
        return Ok(out);
    }
    let weights = match how {
        Aggregation::GatedMean(gates) => {
            if gates.len() != received.len() {
                return Err(Error::Shape(format!("{} gates for {} messages", gates.len(), received.len())));
            }
            let n = received.len() as f64;
            gates.iter().map(|g| g / n).collect()
        }
        Aggregation::Attention { keys, query } => {
            if keys.len() != received.len() {
                return Err(Error::Shape(format!("{} keys for {} messages", keys.len(), received.len())));
            }
            attention_weights(keys, query)?
        }
    };
    for (m, w) in received.iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(m) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Messages received by one agent, tagged with the sender.
pub type Inbox = Vec<(usize, Vec<f64>)>;

/// What each agent receives: the messages of every other present agent,
/// tagged with the sender, quantized first when `quantizer` is given. Absent
/// agents (`None`) neither send nor receive.
pub fn exchange(messages: &[Option<Vec<f64>>], quantizer: Option<&Quantizer>) -> Result<Vec<Inbox>> {
    let delivered = messages
        .iter()
        .map(|m| match (m, quantizer) {
            (Some(m), Some(q)) => m.iter().map(|&x| q.quantize(x)).collect::<Result<Vec<_>>>().map(Some),
            (m, _) => Ok(m.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..messages.len())
        .map(|i| {
            if messages[i].is_none() {
                return Vec::new();
            }
            delivered
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .filter_map(|(j, m)| m.as_ref().map(|m| (j, m.clone())))
                .collect()
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Slots {
    w_x: usize,
    w_h: usize,
    b: usize,
    w_a: usize,
    b_a: usize,
    w_m: usize,
    b_m: usize,
    /// Gate weight and bias, or key and query weights.
    aux: (usize, usize),
}

/// Parameter handles recorded on one tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

/// Outputs of one agent for one step, as tape handles.
#[derive(Clone, Copy, Debug)]
pub struct AgentStep {
    pub logits: Var,
    pub message: Var,
    pub hidden: Var,
    /// Gate (`1 × 1`) or attention key (`1 × KEY_SIZE`) sent along with the message.
    pub aux: Var,
}

/// The team's parameters. With shared parameters every agent maps to the
/// same tensors; otherwise names are prefixed with the agent index.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentNet {
    config: AgentConfig,
    obs_dim: usize,
    n_actions: usize,
    n_agents: usize,
    params: ParameterSet,
    slots: Vec<Slots>,
}

const NAMES: [&str; 7] = ["w_x", "w_h", "b", "w_a", "b_a", "w_m", "b_m"];

impl AgentNet {
    pub fn new<R: Rng + ?Sized>(config: &AgentConfig, spec: &EnvSpec, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (h, l, o, a) = (config.hidden, config.msg_len, spec.obs_dim(), spec.n_actions());
        let mut params = ParameterSet::new();
        let copies = if config.share_params { 1 } else { spec.n_agents };
        for c in 0..copies {
            let p = |name: &str| prefixed(config, c, name);
            params.insert_random(p("w_x"), o + l, h, 1.0, rng);
            params.insert_random(p("w_h"), h, h, 1.0, rng);
            params.insert(p("b"), Tensor::zeros(1, h));
            params.insert_random(p("w_a"), h, a, 1.0, rng);
            params.insert(p("b_a"), Tensor::zeros(1, a));
            params.insert_random(p("w_m"), h, l, 1.0, rng);
            params.insert(p("b_m"), Tensor::zeros(1, l));
            match config.scheme {
                Scheme::Ic3netLike => {
                    params.insert_random(p("w_g"), h, 1, 1.0, rng);
                    params.insert(p("b_g"), Tensor::zeros(1, 1));
                }
                Scheme::TarmacLike => {
                    params.insert_random(p("w_k"), h, KEY_SIZE, 1.0, rng);
                    params.insert_random(p("w_q"), h, KEY_SIZE, 1.0, rng);
                }
            }
        }
        Self::from_params(config, spec, params)
    }

    /// Wraps existing parameters, checking names and shapes.
    pub fn from_params(config: &AgentConfig, spec: &EnvSpec, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let (h, l, o, a) = (config.hidden, config.msg_len, spec.obs_dim(), spec.n_actions());
        let aux_names = match config.scheme {
            Scheme::Ic3netLike => [("w_g", (h, 1)), ("b_g", (1, 1))],
            Scheme::TarmacLike => [("w_k", (h, KEY_SIZE)), ("w_q", (h, KEY_SIZE))],
        };
        let shapes = [(o + l, h), (h, h), (1, h), (h, a), (1, a), (h, l), (1, l)];
        let lookup = |c: usize, name: &str, shape: (usize, usize)| -> Result<usize> {
            let full = prefixed(config, c, name);
            let i = params
                .index_of(&full)
                .ok_or_else(|| Error::Config(format!("missing parameter {full}")))?;
            let got = params.tensor(i).shape();
            if got != shape {
                return Err(Error::Shape(format!("{full} is {got:?}, expected {shape:?}")));
            }
            Ok(i)
        };
        let copies = if config.share_params { 1 } else { spec.n_agents };
        let mut per_copy = Vec::with_capacity(copies);
        for c in 0..copies {
            let mut idx = [0; 7];
            for (k, (name, shape)) in NAMES.iter().zip(shapes).enumerate() {
                idx[k] = lookup(c, name, shape)?;
            }
            let aux = (
                lookup(c, aux_names[0].0, aux_names[0].1)?,
                lookup(c, aux_names[1].0, aux_names[1].1)?,
            );
            per_copy.push(Slots {
                w_x: idx[0],
                w_h: idx[1],
                b: idx[2],
                w_a: idx[3],
                b_a: idx[4],
                w_m: idx[5],
                b_m: idx[6],
                aux,
            });
        }
        let expected = copies * 9;
        if params.len() != expected {
            return Err(Error::Config(format!("{} parameters, expected {expected}", params.len())));
        }
        let slots = (0..spec.n_agents).map(|i| per_copy[if config.share_params { 0 } else { i }]).collect();
        Ok(AgentNet {
            config: config.clone(),
            obs_dim: o,
            n_actions: a,
            n_agents: spec.n_agents,
            params,
            slots,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn into_params(self) -> ParameterSet {
        self.params
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn msg_len(&self) -> usize {
        self.config.msg_len
    }

    /// Records every parameter on `tape` once.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: tape.params(&self.params),
        }
    }

    pub fn zero_hidden(&self, tape: &mut Tape) -> Var {
        tape.leaf(Tensor::zeros(1, self.config.hidden))
    }

    pub fn zero_message(&self, tape: &mut Tape) -> Var {
        tape.leaf(Tensor::zeros(1, self.config.msg_len))
    }

    /// One recurrent step of agent `agent`: `received` is the aggregated
    /// message and `hidden` the previous hidden state.
    pub fn step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        agent: usize,
        obs: &[f64],
        received: Var,
        hidden: Var,
    ) -> Result<AgentStep> {
        if obs.len() != self.obs_dim {
            return Err(Error::Shape(format!("observation of {}, expected {}", obs.len(), self.obs_dim)));
        }
        let s = self.slot(agent)?;
        let v = |i: usize| bound.vars[i];
        let o = tape.leaf(Tensor::row(obs.to_vec()));
        let x = tape.concat_cols(&[o, received])?;
        let h = tape.rnn_cell(x, hidden, v(s.w_x), v(s.w_h), v(s.b))?;
        let logits = tape.matmul(h, v(s.w_a))?;
        let logits = tape.add_bias(logits, v(s.b_a))?;
        let m = tape.matmul(h, v(s.w_m))?;
        let m = tape.add_bias(m, v(s.b_m))?;
        let message = tape.squash(m);
        let aux = match self.config.scheme {
            Scheme::Ic3netLike => {
                let g = tape.matmul(h, v(s.aux.0))?;
                let g = tape.add_bias(g, v(s.aux.1))?;
                tape.sigmoid(g)
            }
            Scheme::TarmacLike => tape.matmul(h, v(s.aux.0))?,
        };
        Ok(AgentStep {
            logits,
            message,
            hidden: h,
            aux,
        })
    }

    /// Aggregates on the tape what `receiver` gets from `senders`, each a
    /// delivered message and the aux output sent with it. `hidden` is the
    /// receiver's state before this step, from which its query is formed.
    pub fn aggregate(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        receiver: usize,
        hidden: Var,
        senders: &[(Var, Var)],
    ) -> Result<Var> {
        if senders.is_empty() {
            return Ok(self.zero_message(tape));
        }
        let msgs: Vec<Var> = senders.iter().map(|s| s.0).collect();
        let aux: Vec<Var> = senders.iter().map(|s| s.1).collect();
        let stacked = tape.concat_rows(&msgs)?;
        let weights = match self.config.scheme {
            Scheme::Ic3netLike => {
                let gates = tape.concat_cols(&aux)?;
                tape.scale(gates, 1.0 / senders.len() as f64)
            }
            Scheme::TarmacLike => {
                let s = self.slot(receiver)?;
                let query = tape.matmul(hidden, bound.vars[s.aux.1])?;
                let keys = tape.concat_rows(&aux)?;
                let kt = tape.transpose(keys);
                let scores = tape.matmul(query, kt)?;
                let scores = tape.scale(scores, 1.0 / (KEY_SIZE as f64).sqrt());
                tape.softmax(scores)
            }
        };
        tape.matmul(weights, stacked)
    }

    fn slot(&self, agent: usize) -> Result<Slots> {
        self.slots
            .get(agent)
            .copied()
            .ok_or_else(|| Error::Shape(format!("agent {agent} of {}", self.n_agents)))
    }
}

fn prefixed(config: &AgentConfig, copy: usize, name: &str) -> String {
    if config.share_params {
        name.to_string()
    } else {
        format!("agent{copy}/{name}")
    }
}
