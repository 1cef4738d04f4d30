//! Policy-gradient training with the entropy regularizers.
//!
//! Training runs in two phases. For the first `t_n` epochs the agents learn
//! the task alone. From epoch `t_n` on, the regularizer of the chosen
//! variant is switched on with weight `alpha_p`:
//!
//! * `Ori` trains without any regularizer.
//! * `Zc` silences every message.
//! * `Difem` adds a per-digit Gaussian differential-entropy penalty.
//! * `Disem` injects the discrete-entropy pseudo gradient at every message.
//!
//! Each episode is recorded on its own tape. Rollouts of one epoch run in
//! parallel with seeds derived from `(seed, epoch, episode)`, and their
//! gradients are summed in episode order, so results do not depend on the
//! thread count.

use std::f64::consts::{E, PI};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::AgentNet;
use crate::autodiff::checkpoint::Checkpoint;
use crate::autodiff::{ParameterSet, Tape, Tensor, Var};
use crate::config::RunConfig;
use crate::entropy::{self, MessageBatch};
use crate::env::{self, EnvSpec, Metric, Task};
use crate::error::{Error, Result};
use crate::quantization::Quantizer;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Ori,
    Zc,
    Difem,
    Disem,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Ori, Variant::Zc, Variant::Difem, Variant::Disem];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Ori => "ORI",
            Variant::Zc => "ZC",
            Variant::Difem => "DifEM",
            Variant::Disem => "DisEM",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ori" | "original" => Ok(Variant::Ori),
            "zc" | "zerocomm" => Ok(Variant::Zc),
            "difem" => Ok(Variant::Difem),
            "disem" => Ok(Variant::Disem),
            _ => Err(Error::Config(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub variant: Variant,
    /// Epochs trained before the regularizer is switched on.
    pub t_n: usize,
    pub t_max: usize,
    pub alpha_p: f64,
    pub lr: f64,
    pub momentum: f64,
    pub episodes_per_epoch: usize,
    pub eval_episodes: usize,
    /// Evaluate after every this many epochs (and always at `t_n` and `t_max`).
    pub eval_every: usize,
    /// Added to each digit variance inside the differential-entropy penalty.
    pub difem_var_eps: f64,
    /// Rescale the gradient to at most this global norm.
    pub grad_clip: Option<f64>,
}

impl TrainSchedule {
    /// Regularizer timing and weight per task; optimizer settings shared.
    pub fn for_task(task: Task) -> Self {
        let (t_n, alpha_p, t_max) = match task {
            Task::TreasureHunt => (100, 0.2, 200),
            Task::PredatorPrey => (100, 0.05, 150),
            Task::TrafficJunction => (1000, 0.05, 1250),
        };
        TrainSchedule {
            variant: Variant::Ori,
            t_n,
            t_max,
            alpha_p,
            lr: 0.005,
            momentum: 0.9,
            episodes_per_epoch: 32,
            eval_episodes: 100,
            eval_every: 10,
            difem_var_eps: 1e-6,
            grad_clip: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.t_n > self.t_max {
            return bad(format!("t_n {} exceeds t_max {}", self.t_n, self.t_max));
        }
        if !(self.alpha_p.is_finite() && self.alpha_p >= 0.0) {
            return bad(format!("alpha_p {} must be non-negative", self.alpha_p));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.episodes_per_epoch == 0 || self.eval_every == 0 {
            return bad("episodes_per_epoch and eval_every must be positive".into());
        }
        if !(self.difem_var_eps > 0.0) {
            return bad(format!("difem_var_eps {} must be positive", self.difem_var_eps));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }

    /// Regularizer weight in effect during `epoch`.
    pub fn alpha(&self, epoch: usize) -> f64 {
        if epoch >= self.t_n {
            self.alpha_p
        } else {
            0.0
        }
    }
}

/// Mixes `parts` into `base` (splitmix64 finalizer per part).
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_ENV: u64 = 0;
const STREAM_ACTIONS: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Sampled actions, continuous (or straight-through) delivery.
    Train,
    /// Greedy actions, quantized delivery.
    Eval,
}

/// Everything a rollout needs besides the seed.
#[derive(Clone, Copy, Debug)]
pub struct Policy<'a> {
    pub net: &'a AgentNet,
    pub spec: &'a EnvSpec,
    pub variant: Variant,
    pub quantizer: &'a Quantizer,
}

/// One message as produced by the generator, before quantization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub episode: usize,
    pub t: usize,
    pub agent: usize,
    pub message: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
struct Sample {
    agent: usize,
    t: usize,
    logp: Var,
}

/// A recorded episode together with the tape it was computed on.
#[derive(Debug)]
pub struct Episode {
    tape: Tape,
    samples: Vec<Sample>,
    returns: Vec<f64>,
    nodes: Vec<Var>,
    pub messages: Vec<MessageRecord>,
    pub outcome: env::Outcome,
    /// Undiscounted reward summed over time, averaged over agents.
    pub total_reward: f64,
}

impl Episode {
    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }
}

fn sample_action(logp: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return a;
        }
    }
    logp.len() - 1
}

fn greedy(logp: &[f64]) -> usize {
    let mut best = 0;
    for (a, &v) in logp.iter().enumerate() {
        if v > logp[best] {
            best = a;
        }
    }
    best
}

/// Plays one episode. Environment and action sampling use streams derived
/// from `seed`.
pub fn rollout(p: &Policy<'_>, mode: Mode, seed: u64, episode: usize) -> Result<Episode> {
    let (net, spec) = (p.net, p.spec);
    let n = spec.n_agents;
    if net.n_agents() != n || net.obs_dim() != spec.obs_dim() || net.n_actions() != spec.n_actions() {
        return Err(Error::Shape(format!("network does not fit {}", spec.label())));
    }
    let (mut state, mut obs) = env::reset(spec, derive_seed(seed, &[STREAM_ENV]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_ACTIONS]));
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape);
    let zero_h = net.zero_hidden(&mut tape);
    let zero_m = net.zero_message(&mut tape);
    let stay = spec.n_actions() - 1;
    let mut hidden = vec![zero_h; n];
    let mut sent: Vec<Option<(Var, Var)>> = vec![None; n];
    let mut samples = Vec::new();
    let mut nodes = Vec::new();
    let mut messages = Vec::new();
    let mut rewards: Vec<Vec<f64>> = Vec::new();
    let mut links: Vec<Vec<bool>> = Vec::new();

    while !state.is_done() {
        let t = state.t();
        let mut actions = vec![stay; n];
        let mut next = vec![None; n];
        // Whether the agent acting at t is the same one that acted at t - 1.
        let mut continues = vec![false; n];
        for i in 0..n {
            if !state.present(i) {
                hidden[i] = zero_h;
                continue;
            }
            if state.fresh(i) {
                hidden[i] = zero_h;
            } else {
                continues[i] = true;
            }
            let senders: Vec<(Var, Var)> = (0..n).filter(|&j| j != i).filter_map(|j| sent[j]).collect();
            let agg = net.aggregate(&mut tape, &bound, i, hidden[i], &senders)?;
            let out = net.step(&mut tape, &bound, i, &obs[i], agg, hidden[i])?;
            hidden[i] = out.hidden;
            let logp = tape.log_softmax(out.logits);
            let action = match mode {
                Mode::Train => sample_action(tape.value(logp).data(), &mut rng),
                Mode::Eval => greedy(tape.value(logp).data()),
            };
            if state.acting(i) {
                actions[i] = action;
                if mode == Mode::Train {
                    let lp = tape.pick(logp, action)?;
                    samples.push(Sample { agent: i, t, logp: lp });
                }
            }
            let delivered = match (p.variant, mode) {
                (Variant::Zc, _) => zero_m,
                (_, Mode::Eval) => tape.straight_through(out.message, p.quantizer)?,
                _ if net.config().straight_through => tape.straight_through(out.message, p.quantizer)?,
                _ => out.message,
            };
            let message = if p.variant == Variant::Zc {
                vec![0.0; net.msg_len()]
            } else {
                tape.value(out.message).data().to_vec()
            };
            messages.push(MessageRecord {
                episode,
                t,
                agent: i,
                message,
            });
            nodes.push(out.message);
            next[i] = Some((delivered, out.aux));
        }
        sent = next;
        let tr = state.step(&actions)?;
        rewards.push(tr.rewards);
        links.push(continues);
        obs = tr.observations;
    }

    // Discounted return of every agent from every step; a chain ends when
    // the slot empties or changes occupant.
    let steps = rewards.len();
    let mut g = vec![vec![0.0; n]; steps];
    for t in (0..steps).rev() {
        for i in 0..n {
            let tail = if t + 1 < steps && links[t + 1][i] { g[t + 1][i] } else { 0.0 };
            g[t][i] = rewards[t][i] + spec.gamma * tail;
        }
    }
    let returns = samples.iter().map(|s| g[s.t][s.agent]).collect();
    let total_reward = rewards.iter().flatten().sum::<f64>() / n as f64;
    Ok(Episode {
        tape,
        samples,
        returns,
        nodes,
        messages,
        outcome: state.outcome(),
        total_reward,
    })
}

/// Episodes collected with one set of parameters.
#[derive(Debug)]
pub struct RolloutBatch {
    pub episodes: Vec<Episode>,
    /// Training epoch whose parameters produced the batch.
    pub epoch: usize,
}

impl RolloutBatch {
    /// Every message agent `agent` sent, in episode and time order.
    pub fn agent_messages(&self, agent: usize, msg_len: usize) -> Result<Option<MessageBatch>> {
        agent_batch(self.episodes.iter().flat_map(|e| &e.messages), agent, msg_len)
    }

    pub fn mean_return(&self) -> f64 {
        mean(self.episodes.iter().map(|e| e.total_reward))
    }
}

fn agent_batch<'a>(
    records: impl Iterator<Item = &'a MessageRecord>,
    agent: usize,
    msg_len: usize,
) -> Result<Option<MessageBatch>> {
    let mut values = Vec::new();
    let mut n = 0;
    for r in records.filter(|r| r.agent == agent) {
        values.extend_from_slice(&r.message);
        n += 1;
    }
    if n == 0 {
        return Ok(None);
    }
    MessageBatch::new(values, n, msg_len).map(Some)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Plays `seeds.len()` episodes in parallel.
pub fn collect(p: &Policy<'_>, mode: Mode, seeds: &[u64], epoch: usize) -> Result<RolloutBatch> {
    let episodes = seeds
        .par_iter()
        .enumerate()
        .map(|(e, &s)| rollout(p, mode, s, e))
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutBatch { episodes, epoch })
}

/// Summed per-digit Gaussian differential entropy of `batch`, in bits,
/// and its gradient with respect to every message value (row-major).
pub fn difem_penalty(batch: &MessageBatch, var_eps: f64) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(batch.n(), batch.len(), batch.values().to_vec())?);
    let v = tape.column_variance(x);
    let v = tape.add_const(v, var_eps);
    let v = tape.scale(v, 2.0 * PI * E);
    let h = tape.log2(v);
    let h = tape.scale(h, 0.5);
    let total = tape.sum(h);
    tape.backward(total)?;
    let value = tape.value(total).data()[0];
    let grad = tape.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; batch.values().len()]);
    Ok((value, grad))
}

/// Message-entropy term of the update and what it was computed from.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct GradientStats {
    pub samples: usize,
    pub alpha: f64,
    /// Mean over agents of the training batch's message entropy, in bits,
    /// with empty bins contributing nothing.
    pub train_entropy_bits: f64,
    /// Mean over agents of the differential-entropy penalty (DifEM only).
    pub difem_penalty: f64,
    pub grad_norm: f64,
}

/// Gradient of the training loss for `batch`.
///
/// The policy term is `-(1/S) Σ A·log π` over all `S` acting agent-steps,
/// with advantages equal to discounted returns normalized over the batch.
/// The entropy term is added as an upstream gradient at each message.
#[allow(clippy::too_many_arguments)]
pub fn batch_gradients(
    params: &ParameterSet,
    batch: RolloutBatch,
    variant: Variant,
    alpha: f64,
    q: &Quantizer,
    epsilon: f64,
    var_eps: f64,
    msg_len: usize,
    n_agents: usize,
) -> Result<(ParameterSet, GradientStats)> {
    let mut stats = GradientStats {
        alpha,
        ..GradientStats::default()
    };
    let mut entropies = Vec::new();
    let mut penalties = Vec::new();
    // Upstream gradient per episode and message record.
    let mut inject: Vec<Vec<Option<Vec<f64>>>> =
        batch.episodes.iter().map(|e| vec![None; e.messages.len()]).collect();
    for agent in 0..n_agents {
        let Some(mb) = batch.agent_messages(agent, msg_len)? else {
            continue;
        };
        entropies.push(entropy::entropy(&mb, q, 0.0)?);
        let rows: Option<Vec<f64>> = match variant {
            Variant::Disem if alpha > 0.0 => Some(entropy::pseudo_gradient(&mb, q, epsilon)?.into_values()),
            Variant::Difem if alpha > 0.0 => {
                let (value, grad) = difem_penalty(&mb, var_eps)?;
                penalties.push(value);
                Some(grad)
            }
            _ => None,
        };
        if let Some(rows) = rows {
            let mut k = 0;
            for (e, ep) in batch.episodes.iter().enumerate() {
                for (r, rec) in ep.messages.iter().enumerate() {
                    if rec.agent == agent {
                        let row = &rows[k * msg_len..(k + 1) * msg_len];
                        inject[e][r] = Some(row.iter().map(|g| alpha * g).collect());
                        k += 1;
                    }
                }
            }
        }
    }
    stats.train_entropy_bits = mean(entropies.into_iter());
    stats.difem_penalty = mean(penalties.into_iter());

    let all: Vec<f64> = batch.episodes.iter().flat_map(|e| e.returns.iter().copied()).collect();
    let s = all.len();
    stats.samples = s;
    let mu = mean(all.iter().copied());
    let sd = (all.iter().map(|g| (g - mu).powi(2)).sum::<f64>() / s.max(1) as f64).sqrt();
    let norm = if sd > 1e-12 { 1.0 / sd } else { 1.0 };

    let grads = batch
        .episodes
        .into_par_iter()
        .zip(inject)
        .map(|(mut ep, inj)| -> Result<ParameterSet> {
            let tape = &mut ep.tape;
            let terms: Vec<Var> = ep
                .samples
                .iter()
                .zip(&ep.returns)
                .map(|(smp, &g)| tape.scale(smp.logp, -(g - mu) * norm / s as f64))
                .collect();
            let loss = if terms.is_empty() {
                tape.leaf(Tensor::scalar(0.0))
            } else {
                let row = tape.concat_cols(&terms)?;
                tape.sum(row)
            };
            for (node, g) in ep.nodes.iter().zip(inj) {
                if let Some(g) = g {
                    tape.inject_gradient(*node, &g)?;
                }
            }
            tape.backward(loss)?;
            Ok(tape.param_gradients(params))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = params.zeros_like();
    for g in &grads {
        total.add_scaled(g, 1.0)?;
    }
    stats.grad_norm = total.norm();
    Ok((total, stats))
}

/// Result of evaluating a model on fixed episodes.
#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub episodes: usize,
    pub metric: Metric,
    /// Mean episode length or success rate, depending on the task.
    pub perf: f64,
    pub mean_length: f64,
    pub success_rate: f64,
    pub mean_return: f64,
    /// Mean over agents of the quantized message entropy, in bits. Empty
    /// bins contribute nothing, so silent agents score exactly zero.
    pub entropy_bits: f64,
    pub agent_entropy_bits: Vec<f64>,
    #[serde(skip)]
    pub messages: Vec<MessageRecord>,
}

impl EvalReport {
    /// Every message of `agent`, in episode and time order.
    pub fn agent_messages(&self, agent: usize, msg_len: usize) -> Result<Option<MessageBatch>> {
        agent_batch(self.messages.iter(), agent, msg_len)
    }
}

/// Greedy evaluation with quantized delivery on episodes derived from
/// `eval_seed`.
pub fn evaluate(p: &Policy<'_>, episodes: usize, eval_seed: u64) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let seeds: Vec<u64> = (0..episodes as u64).map(|e| derive_seed(eval_seed, &[e])).collect();
    let batch = collect(p, Mode::Eval, &seeds, 0)?;
    let metric = p.spec.metric();
    let mut agent_entropy_bits = Vec::new();
    for agent in 0..p.spec.n_agents {
        if let Some(mb) = batch.agent_messages(agent, p.net.msg_len())? {
            agent_entropy_bits.push(entropy::entropy(&mb, p.quantizer, 0.0)?);
        }
    }
    let outcomes: Vec<env::Outcome> = batch.episodes.iter().map(|e| e.outcome).collect();
    Ok(EvalReport {
        episodes,
        metric,
        perf: mean(outcomes.iter().map(|o| o.score(metric))),
        mean_length: mean(outcomes.iter().map(|o| o.length as f64)),
        success_rate: mean(outcomes.iter().map(|o| f64::from(u8::from(o.success)))),
        mean_return: batch.mean_return(),
        entropy_bits: mean(agent_entropy_bits.iter().copied()),
        agent_entropy_bits,
        messages: batch.episodes.into_iter().flat_map(|e| e.messages).collect(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_return: f64,
    /// Training-batch performance (sampled actions, continuous messages).
    pub train_perf: f64,
    pub gradient: GradientStats,
}

/// Owns the parameters and optimizer state of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: RunConfig,
    spec: EnvSpec,
    schedule: TrainSchedule,
    quantizer: Quantizer,
    net: AgentNet,
    velocity: ParameterSet,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.spec()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.run.seed, &[STREAM_INIT]));
        let net = AgentNet::new(&config.agent, &spec, &mut rng)?;
        let velocity = net.params().zeros_like();
        Ok(Trainer {
            config: config.clone(),
            schedule: config.schedule()?,
            quantizer: config.quantizer()?,
            spec,
            net,
            velocity,
            epoch: 0,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(config)?;
        let [params, velocity] = ckpt.sets.as_slice() else {
            return Err(Error::Checkpoint(format!("expected 2 parameter sets, found {}", ckpt.sets.len())));
        };
        t.net = AgentNet::from_params(&config.agent, &t.spec, params.clone())?;
        if !velocity.same_layout(params) {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        t.velocity = velocity.clone();
        t.epoch = ckpt.epoch as usize;
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn schedule(&self) -> &TrainSchedule {
        &self.schedule
    }

    pub fn net(&self) -> &AgentNet {
        &self.net
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn policy(&self) -> Policy<'_> {
        Policy {
            net: &self.net,
            spec: &self.spec,
            variant: self.schedule.variant,
            quantizer: &self.quantizer,
        }
    }

    /// Parameters and optimizer state after `epoch` completed epochs.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.epoch as u64, vec![self.net.params().clone(), self.velocity.clone()])
    }

    /// Training episodes for the current epoch.
    pub fn collect(&self) -> Result<RolloutBatch> {
        let base = derive_seed(self.config.run.seed, &[STREAM_TRAIN, self.epoch as u64]);
        let seeds: Vec<u64> = (0..self.schedule.episodes_per_epoch as u64)
            .map(|e| derive_seed(base, &[e]))
            .collect();
        collect(&self.policy(), Mode::Train, &seeds, self.epoch)
    }

    /// One optimizer step on `batch`, which must come from the current
    /// parameters.
    pub fn policy_gradient_update(&mut self, batch: RolloutBatch) -> Result<GradientStats> {
        if batch.epoch != self.epoch {
            return Err(Error::InvalidBatch(format!(
                "batch from epoch {} used at epoch {}",
                batch.epoch, self.epoch
            )));
        }
        let alpha = self.schedule.alpha(self.epoch);
        let (mut grads, stats) = batch_gradients(
            self.net.params(),
            batch,
            self.schedule.variant,
            alpha,
            &self.quantizer,
            self.config.entropy.epsilon,
            self.schedule.difem_var_eps,
            self.net.msg_len(),
            self.spec.n_agents,
        )?;
        if !grads.all_finite() {
            return Err(Error::NonFinite(format!(
                "gradient at epoch {} ({}, alpha {alpha}, train entropy {:.4} bits)",
                self.epoch,
                self.config.label(),
                stats.train_entropy_bits
            )));
        }
        if let Some(clip) = self.schedule.grad_clip {
            if stats.grad_norm > clip {
                grads.values_mut().for_each(|g| *g *= clip / stats.grad_norm);
            }
        }
        let mu = self.schedule.momentum;
        for (v, g) in self.velocity.values_mut().zip(grads.values()) {
            *v = mu * *v + g;
        }
        self.net.params_mut().add_scaled(&self.velocity, -self.schedule.lr)?;
        self.epoch += 1;
        Ok(stats)
    }

    pub fn train_epoch(&mut self) -> Result<EpochStats> {
        let epoch = self.epoch;
        let batch = self.collect()?;
        let metric = self.spec.metric();
        let mean_return = batch.mean_return();
        let train_perf = mean(batch.episodes.iter().map(|e| e.outcome.score(metric)));
        let gradient = self.policy_gradient_update(batch)?;
        Ok(EpochStats {
            epoch,
            mean_return,
            train_perf,
            gradient,
        })
    }

    pub fn evaluate(&self, episodes: usize) -> Result<EvalReport> {
        evaluate(&self.policy(), episodes, self.config.run.eval_seed)
    }
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Completed training epochs.
    pub epoch: usize,
    pub variant: String,
    pub task: String,
    pub setting: String,
    pub seed: u64,
    pub perf_metric: f64,
    pub entropy_bits: f64,
    pub mean_return: f64,
    pub wall_time_s: f64,
}

pub const METRICS_HEADER: [&str; 9] = [
    "epoch",
    "variant",
    "task",
    "setting",
    "seed",
    "perf_metric",
    "entropy_bits",
    "mean_return",
    "wall_time_s",
];

/// Progress notifications from [`train`].
#[derive(Debug)]
pub enum Progress<'a> {
    Epoch(&'a EpochStats),
    Eval(&'a MetricsRow),
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub at_t_n: EvalReport,
    pub last: EvalReport,
    pub checkpoint_t_n: Checkpoint,
    pub checkpoint_last: Checkpoint,
}

pub const CHECKPOINT_T_N: &str = "checkpoint_tn.bin";
pub const CHECKPOINT_LAST: &str = "checkpoint_final.bin";
pub const METRICS_FILE: &str = "metrics.csv";

/// Runs a full schedule. With `out_dir` set, writes the metrics CSV, both
/// checkpoints and the resolved config there.
pub fn train(config: &RunConfig, out_dir: Option<&Path>, mut progress: impl FnMut(Progress<'_>)) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config)?;
    let schedule = trainer.schedule().clone();
    let spec = *trainer.spec();
    let start = Instant::now();
    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let cfg = dir.join("config.toml");
            fs::write(&cfg, config.to_toml()?).map_err(|e| Error::io(&cfg, e))?;
            let mut w = csv::WriterBuilder::new().has_headers(false).from_path(dir.join(METRICS_FILE))?;
            w.write_record(METRICS_HEADER)?;
            w.flush().map_err(|e| Error::io(dir.join(METRICS_FILE), e))?;
            Some(w)
        }
        None => None,
    };
    let save = |ckpt: &Checkpoint, name: &str| -> Result<()> {
        match out_dir {
            Some(dir) => ckpt.save(dir.join(name)),
            None => Ok(()),
        }
    };
    let mut rows = Vec::new();
    let mut snapshot_t_n = None;
    let mut evaluate_now = |trainer: &Trainer, rows: &mut Vec<MetricsRow>| -> Result<EvalReport> {
        let report = trainer.evaluate(schedule.eval_episodes)?;
        let row = MetricsRow {
            epoch: trainer.epoch(),
            variant: schedule.variant.to_string(),
            task: spec.task.to_string(),
            setting: spec.setting.to_string(),
            seed: config.run.seed,
            perf_metric: report.perf,
            entropy_bits: report.entropy_bits,
            mean_return: report.mean_return,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        if let Some(w) = writer.as_mut() {
            w.serialize(&row)?;
            w.flush().map_err(|e| Error::io(PathBuf::from(METRICS_FILE), e))?;
        }
        rows.push(row);
        Ok(report)
    };
    let mut last = None;
    loop {
        let epoch = trainer.epoch();
        if epoch == schedule.t_n {
            let ckpt = trainer.checkpoint();
            save(&ckpt, CHECKPOINT_T_N)?;
            let report = evaluate_now(&trainer, &mut rows)?;
            progress(Progress::Eval(rows.last().expect("just pushed")));
            snapshot_t_n = Some((ckpt, report.clone()));
            last = Some(report);
        } else if epoch > 0 && (epoch % schedule.eval_every == 0 || epoch == schedule.t_max) {
            last = Some(evaluate_now(&trainer, &mut rows)?);
            progress(Progress::Eval(rows.last().expect("just pushed")));
        }
        if epoch >= schedule.t_max {
            break;
        }
        let stats = trainer.train_epoch()?;
        progress(Progress::Epoch(&stats));
    }
    let last = last.expect("evaluated at t_max");
    let checkpoint_last = trainer.checkpoint();
    save(&checkpoint_last, CHECKPOINT_LAST)?;
    let (checkpoint_t_n, at_t_n) = snapshot_t_n.expect("t_n <= t_max");
    Ok(TrainOutcome {
        rows,
        at_t_n,
        last,
        checkpoint_t_n,
        checkpoint_last,
    })
}
