//! Run configuration, read from TOML.
//!
//! ```toml
//! [env]
//! task = "predator_prey"
//! setting = "A"
//!
//! [agent]
//! scheme = "ic3net_like"
//! hidden = 32
//! msg_len = 16
//!
//! [train]
//! variant = "disem"
//! t_n = 40
//! t_max = 80
//!
//! [run]
//! seed = 3
//! ```
//!
//! Schedule values left out fall back to the per-task defaults of
//! [`TrainSchedule::for_task`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::entropy::DEFAULT_EPSILON;
use crate::env::{EnvSpec, Setting, Task};
use crate::error::{Error, Result};
use crate::quantization::{Quantizer, DEFAULT_DELTA};
use crate::trainer::{TrainSchedule, Variant};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub agent: AgentConfig,
    pub quantizer: QuantizerConfig,
    pub entropy: EntropyConfig,
    pub train: TrainConfig,
    pub run: RunSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub task: Task,
    pub setting: Setting,
    pub n_agents: Option<usize>,
    pub t_max: Option<usize>,
    pub gamma: Option<f64>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            task: Task::PredatorPrey,
            setting: Setting::A,
            n_agents: None,
            t_max: None,
            gamma: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerConfig {
    pub delta: f64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig { delta: DEFAULT_DELTA }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropyConfig {
    /// Added to every bin count before taking logarithms.
    pub epsilon: f64,
}

impl Default for EntropyConfig {
    fn default() -> Self {
        EntropyConfig {
            epsilon: DEFAULT_EPSILON,
        }
    }
}

/// Training options; `None` means the task default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub t_n: Option<usize>,
    pub t_max: Option<usize>,
    pub alpha_p: Option<f64>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub episodes_per_epoch: Option<usize>,
    pub eval_episodes: Option<usize>,
    pub eval_every: Option<usize>,
    pub difem_var_eps: Option<f64>,
    pub grad_clip: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Seed of the evaluation episodes, shared by all runs so that
    /// evaluations are compared on the same episodes.
    pub eval_seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            eval_seed: 1_000_003,
        }
    }
}

impl RunConfig {
    pub fn new(task: Task, setting: Setting) -> Self {
        RunConfig {
            env: EnvConfig {
                task,
                setting,
                ..EnvConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.spec()?;
        self.agent.validate()?;
        self.quantizer()?;
        self.schedule()?;
        if !(self.entropy.epsilon.is_finite() && self.entropy.epsilon >= 0.0) {
            return Err(Error::Config(format!("epsilon {} must be non-negative", self.entropy.epsilon)));
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<EnvSpec> {
        let mut spec = EnvSpec::new(self.env.task, self.env.setting);
        if let Some(n) = self.env.n_agents {
            spec.n_agents = n;
        }
        if let Some(t) = self.env.t_max {
            spec.t_max = t;
        }
        if let Some(g) = self.env.gamma {
            spec.gamma = g;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn quantizer(&self) -> Result<Quantizer> {
        Quantizer::new(self.quantizer.delta)
    }

    pub fn schedule(&self) -> Result<TrainSchedule> {
        let t = &self.train;
        let d = TrainSchedule::for_task(self.env.task);
        let s = TrainSchedule {
            variant: t.variant,
            t_n: t.t_n.unwrap_or(d.t_n),
            t_max: t.t_max.unwrap_or(d.t_max),
            alpha_p: t.alpha_p.unwrap_or(d.alpha_p),
            lr: t.lr.unwrap_or(d.lr),
            momentum: t.momentum.unwrap_or(d.momentum),
            episodes_per_epoch: t.episodes_per_epoch.unwrap_or(d.episodes_per_epoch),
            eval_episodes: t.eval_episodes.unwrap_or(d.eval_episodes),
            eval_every: t.eval_every.unwrap_or(d.eval_every),
            difem_var_eps: t.difem_var_eps.unwrap_or(d.difem_var_eps),
            grad_clip: t.grad_clip.or(d.grad_clip),
        };
        s.validate()?;
        Ok(s)
    }

    /// Short label such as `PP-A/DisEM/IC3NET/seed3`.
    pub fn label(&self) -> String {
        format!(
            "{}-{}/{}/{}/seed{}",
            self.env.task.short(),
            self.env.setting,
            self.train.variant,
            self.agent.scheme.short(),
            self.run.seed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::Scheme;

    #[test]
    fn example_config_parses() {
        let c = RunConfig::from_toml_str(
            r#"
            [env]
            task = "treasure_hunt"
            setting = "B"
            [agent]
            scheme = "tarmac_like"
            msg_len = 8
            [train]
            variant = "difem"
            t_n = 5
            [run]
            seed = 9
            "#,
        )
        .unwrap();
        assert_eq!(c.env.task, Task::TreasureHunt);
        assert_eq!(c.agent.scheme, Scheme::TarmacLike);
        assert_eq!(c.agent.msg_len, 8);
        assert_eq!(c.agent.hidden, 64);
        let s = c.schedule().unwrap();
        assert_eq!((s.t_n, s.t_max, s.alpha_p), (5, 200, 0.2));
        assert_eq!(s.variant, Variant::Difem);
        assert_eq!(c.run.seed, 9);
        assert_eq!(c.spec().unwrap().n_agents, 6);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml_str("[env]\ntask = \"chess\"").is_err());
        assert!(RunConfig::from_toml_str("[train]\nlearning_rate = 1.0").is_err());
        assert!(RunConfig::from_toml_str("[quantizer]\ndelta = 0.3").is_err());
        assert!(RunConfig::from_toml_str("[train]\nt_n = 10\nt_max = 5").is_err());
        assert!(RunConfig::from_toml_str("[agent]\nhidden = 0").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::new(Task::TrafficJunction, Setting::B);
        c.train.t_n = Some(3);
        c.train.alpha_p = Some(0.5);
        c.run.seed = 4;
        let back = RunConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
