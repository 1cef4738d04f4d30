//! Communication-critical cooperative tasks.
//!
//! Three tasks with two settings each:
//!
//! | task              | setting A                       | setting B                        |
//! |-------------------|---------------------------------|----------------------------------|
//! | treasure hunt     | n=3, v=0.15, t_max=20           | n=6, v=0.09, t_max=60            |
//! | predator prey     | n=3, D=5, vision 0, t_max=20    | n=5, D=10, vision 1, t_max=40    |
//! | traffic junction  | N=5, p_arr=0.3, t_max=20        | N=10, p_arr=0.05, t_max=40       |
//!
//! Every environment has a fixed number of agent slots. In traffic junction
//! a slot is only *present* while a car occupies it; absent slots observe
//! zeros and neither act nor talk.

mod predator_prey;
mod traffic_junction;
mod treasure_hunt;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use predator_prey::PredatorPrey;
pub use traffic_junction::TrafficJunction;
pub use treasure_hunt::TreasureHunt;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    TreasureHunt,
    PredatorPrey,
    TrafficJunction,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::TreasureHunt, Task::PredatorPrey, Task::TrafficJunction];

    pub fn short(self) -> &'static str {
        match self {
            Task::TreasureHunt => "TH",
            Task::PredatorPrey => "PP",
            Task::TrafficJunction => "TJ",
        }
    }

    pub fn metric(self) -> Metric {
        match self {
            Task::TrafficJunction => Metric::SuccessRate,
            _ => Metric::EpisodeLength,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::TreasureHunt => "treasure_hunt",
            Task::PredatorPrey => "predator_prey",
            Task::TrafficJunction => "traffic_junction",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "treasure_hunt" | "th" => Ok(Task::TreasureHunt),
            "predator_prey" | "pp" => Ok(Task::PredatorPrey),
            "traffic_junction" | "tj" => Ok(Task::TrafficJunction),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    A,
    B,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::A => "A",
            Setting::B => "B",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Setting::A),
            "B" | "b" => Ok(Setting::B),
            _ => Err(Error::Config(format!("unknown setting {s:?}"))),
        }
    }
}

/// How a task's performance is scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Mean episode length; lower is better.
    EpisodeLength,
    /// Fraction of episodes without a collision; higher is better.
    SuccessRate,
}

impl Metric {
    pub fn lower_is_better(self) -> bool {
        matches!(self, Metric::EpisodeLength)
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::EpisodeLength => "timesteps",
            Metric::SuccessRate => "success_rate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskParams {
    TreasureHunt { speed: f64, radius: f64 },
    PredatorPrey { grid: usize, vision: usize },
    TrafficJunction { grid: usize, p_arrive: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub task: Task,
    pub setting: Setting,
    pub n_agents: usize,
    pub t_max: usize,
    pub gamma: f64,
    pub params: TaskParams,
}

pub const DEFAULT_GAMMA: f64 = 0.99;
pub const TREASURE_RADIUS: f64 = 0.1;

impl EnvSpec {
    pub fn new(task: Task, setting: Setting) -> Self {
        use {Setting::*, Task::*};
        let (n_agents, t_max, params) = match (task, setting) {
            (TreasureHunt, A) => (3, 20, TaskParams::TreasureHunt { speed: 0.15, radius: TREASURE_RADIUS }),
            (TreasureHunt, B) => (6, 60, TaskParams::TreasureHunt { speed: 0.09, radius: TREASURE_RADIUS }),
            (PredatorPrey, A) => (3, 20, TaskParams::PredatorPrey { grid: 5, vision: 0 }),
            (PredatorPrey, B) => (5, 40, TaskParams::PredatorPrey { grid: 10, vision: 1 }),
            (TrafficJunction, A) => (5, 20, TaskParams::TrafficJunction { grid: 7, p_arrive: 0.3 }),
            (TrafficJunction, B) => (10, 40, TaskParams::TrafficJunction { grid: 14, p_arrive: 0.05 }),
        };
        EnvSpec {
            task,
            setting,
            n_agents,
            t_max,
            gamma: DEFAULT_GAMMA,
            params,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_agents == 0 {
            return bad("need at least one agent".into());
        }
        if self.t_max == 0 {
            return bad("t_max must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        match (self.task, self.params) {
            (Task::TreasureHunt, TaskParams::TreasureHunt { speed, radius }) => {
                if !(speed > 0.0 && speed <= 1.0 && radius > 0.0) {
                    return bad(format!("speed {speed} / radius {radius}"));
                }
            }
            (Task::PredatorPrey, TaskParams::PredatorPrey { grid, .. }) => {
                if grid < 2 || grid * grid <= self.n_agents {
                    return bad(format!("grid {grid} too small for {} predators and a prey", self.n_agents));
                }
            }
            (Task::TrafficJunction, TaskParams::TrafficJunction { grid, p_arrive }) => {
                if grid < 3 || !(0.0..=1.0).contains(&p_arrive) {
                    return bad(format!("grid {grid} / p_arrive {p_arrive}"));
                }
            }
            _ => return bad(format!("parameters do not match task {}", self.task)),
        }
        Ok(())
    }

    pub fn n_actions(&self) -> usize {
        match self.task {
            Task::TreasureHunt => treasure_hunt::N_ACTIONS,
            Task::PredatorPrey => predator_prey::N_ACTIONS,
            Task::TrafficJunction => traffic_junction::N_ACTIONS,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self.params {
            TaskParams::TreasureHunt { .. } => treasure_hunt::OBS_DIM,
            TaskParams::PredatorPrey { vision, .. } => predator_prey::obs_dim(vision),
            TaskParams::TrafficJunction { grid, .. } => traffic_junction::obs_dim(grid),
        }
    }

    pub fn metric(&self) -> Metric {
        self.task.metric()
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.task.short(), self.setting)
    }
}

/// Result of one environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub observations: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepInfo {
    /// Treasures found or predators that reached the prey on this step.
    pub newly_completed: usize,
    pub collision: bool,
}

/// Summary of a finished (or truncated) episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Outcome {
    pub length: usize,
    pub success: bool,
}

impl Outcome {
    pub fn score(&self, metric: Metric) -> f64 {
        match metric {
            Metric::EpisodeLength => self.length as f64,
            Metric::SuccessRate => f64::from(u8::from(self.success)),
        }
    }
}

#[derive(Clone, Debug)]
pub enum EnvState {
    TreasureHunt(TreasureHunt),
    PredatorPrey(PredatorPrey),
    TrafficJunction(TrafficJunction),
}

macro_rules! dispatch {
    ($self:expr, $s:ident => $body:expr) => {
        match $self {
            EnvState::TreasureHunt($s) => $body,
            EnvState::PredatorPrey($s) => $body,
            EnvState::TrafficJunction($s) => $body,
        }
    };
}

pub fn reset(spec: &EnvSpec, seed: u64) -> Result<(EnvState, Vec<Vec<f64>>)> {
    spec.validate()?;
    let state = match spec.params {
        TaskParams::TreasureHunt { .. } => EnvState::TreasureHunt(TreasureHunt::new(*spec, seed)),
        TaskParams::PredatorPrey { .. } => EnvState::PredatorPrey(PredatorPrey::new(*spec, seed)),
        TaskParams::TrafficJunction { .. } => EnvState::TrafficJunction(TrafficJunction::new(*spec, seed)),
    };
    let obs = state.observe_all();
    Ok((state, obs))
}

impl EnvState {
    pub fn spec(&self) -> &EnvSpec {
        dispatch!(self, s => &s.spec)
    }

    pub fn t(&self) -> usize {
        dispatch!(self, s => s.t)
    }

    pub fn is_done(&self) -> bool {
        dispatch!(self, s => s.done)
    }

    pub fn step(&mut self, actions: &[usize]) -> Result<Transition> {
        if self.is_done() {
            return Err(Error::EpisodeDone);
        }
        let n = self.spec().n_agents;
        if actions.len() != n {
            return Err(Error::InvalidSpec(format!("{} actions for {n} agents", actions.len())));
        }
        let n_actions = self.spec().n_actions();
        if let Some((agent, &action)) = actions.iter().enumerate().find(|(_, &a)| a >= n_actions) {
            return Err(Error::InvalidAction { agent, action });
        }
        let (rewards, info) = dispatch!(self, s => s.advance(actions));
        Ok(Transition {
            observations: self.observe_all(),
            rewards,
            done: self.is_done(),
            info,
        })
    }

    pub fn observe(&self, agent: usize) -> Vec<f64> {
        dispatch!(self, s => s.observe(agent))
    }

    pub fn observe_all(&self) -> Vec<Vec<f64>> {
        (0..self.spec().n_agents).map(|i| self.observe(i)).collect()
    }

    /// Whether the slot currently holds an agent that sends messages.
    pub fn present(&self, agent: usize) -> bool {
        match self {
            EnvState::TrafficJunction(s) => s.present(agent),
            _ => true,
        }
    }

    /// Whether the slot was just taken by a new occupant, which starts
    /// without memory.
    pub fn fresh(&self, agent: usize) -> bool {
        match self {
            EnvState::TrafficJunction(s) => s.fresh(agent),
            _ => self.t() == 0,
        }
    }

    /// Whether the agent's action affects the world this step.
    pub fn acting(&self, agent: usize) -> bool {
        match self {
            EnvState::TreasureHunt(_) => true,
            EnvState::PredatorPrey(s) => !s.reached(agent),
            EnvState::TrafficJunction(s) => s.present(agent),
        }
    }

    pub fn outcome(&self) -> Outcome {
        dispatch!(self, s => s.outcome())
    }

    /// Plain-text picture of the world for debugging.
    pub fn render(&self) -> String {
        dispatch!(self, s => s.render())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_parameters() {
        let th = EnvSpec::new(Task::TreasureHunt, Setting::A);
        assert_eq!(th.n_agents, 3);
        assert_eq!(th.t_max, 20);
        assert_eq!(th.params, TaskParams::TreasureHunt { speed: 0.15, radius: 0.1 });
        let th_b = EnvSpec::new(Task::TreasureHunt, Setting::B);
        assert_eq!((th_b.n_agents, th_b.t_max), (6, 60));
        assert_eq!(th_b.params, TaskParams::TreasureHunt { speed: 0.09, radius: 0.1 });

        let pp_a = EnvSpec::new(Task::PredatorPrey, Setting::A);
        assert_eq!((pp_a.n_agents, pp_a.t_max), (3, 20));
        assert_eq!(pp_a.params, TaskParams::PredatorPrey { grid: 5, vision: 0 });
        let pp_b = EnvSpec::new(Task::PredatorPrey, Setting::B);
        assert_eq!((pp_b.n_agents, pp_b.t_max), (5, 40));
        assert_eq!(pp_b.params, TaskParams::PredatorPrey { grid: 10, vision: 1 });

        let tj_a = EnvSpec::new(Task::TrafficJunction, Setting::A);
        assert_eq!((tj_a.n_agents, tj_a.t_max), (5, 20));
        assert_eq!(tj_a.params, TaskParams::TrafficJunction { grid: 7, p_arrive: 0.3 });
        let tj_b = EnvSpec::new(Task::TrafficJunction, Setting::B);
        assert_eq!((tj_b.n_agents, tj_b.t_max), (10, 40));
        assert_eq!(tj_b.params, TaskParams::TrafficJunction { grid: 14, p_arrive: 0.05 });
    }

    #[test]
    fn metric_orientation() {
        assert!(Task::TreasureHunt.metric().lower_is_better());
        assert!(Task::PredatorPrey.metric().lower_is_better());
        assert!(!Task::TrafficJunction.metric().lower_is_better());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = EnvSpec::new(Task::PredatorPrey, Setting::A);
        s.params = TaskParams::TreasureHunt { speed: 0.1, radius: 0.1 };
        assert!(reset(&s, 0).is_err());
        let mut s = EnvSpec::new(Task::TreasureHunt, Setting::A);
        s.n_agents = 0;
        assert!(reset(&s, 0).is_err());
        let mut s = EnvSpec::new(Task::PredatorPrey, Setting::A);
        s.params = TaskParams::PredatorPrey { grid: 1, vision: 0 };
        assert!(s.validate().is_err());
    }

    #[test]
    fn actions_are_checked() {
        for task in Task::ALL {
            let spec = EnvSpec::new(task, Setting::A);
            let (mut st, _) = reset(&spec, 1).unwrap();
            let mut acts = vec![0; spec.n_agents];
            acts[1] = spec.n_actions();
            assert!(matches!(st.step(&acts), Err(Error::InvalidAction { agent: 1, .. })));
            assert!(st.step(&[0]).is_err());
        }
    }

    #[test]
    fn step_after_done_is_an_error() {
        for task in Task::ALL {
            let spec = EnvSpec::new(task, Setting::A);
            let (mut st, _) = reset(&spec, 3).unwrap();
            let stay = vec![spec.n_actions() - 1; spec.n_agents];
            while !st.is_done() {
                st.step(&stay).unwrap();
            }
            assert!(matches!(st.step(&stay), Err(Error::EpisodeDone)));
        }
    }

    #[test]
    fn observations_have_declared_length_and_unit_range() {
        for task in Task::ALL {
            for setting in [Setting::A, Setting::B] {
                let spec = EnvSpec::new(task, setting);
                let (mut st, obs) = reset(&spec, 5).unwrap();
                let mut all = obs;
                let mut k = 0;
                while !st.is_done() {
                    let acts: Vec<usize> = (0..spec.n_agents).map(|i| (i + k) % spec.n_actions()).collect();
                    all.extend(st.step(&acts).unwrap().observations);
                    k += 1;
                }
                for o in all {
                    assert_eq!(o.len(), spec.obs_dim(), "{}", spec.label());
                    assert!(o.iter().all(|x| (0.0..=1.0).contains(x)), "{o:?}");
                }
            }
        }
    }

    #[test]
    fn same_seed_and_actions_give_same_trajectory() {
        for task in Task::ALL {
            let spec = EnvSpec::new(task, Setting::B);
            let run = |seed| {
                let (mut st, first) = reset(&spec, seed).unwrap();
                let mut trace = first;
                let mut k = 0usize;
                while !st.is_done() {
                    let acts: Vec<usize> = (0..spec.n_agents).map(|i| (i * 7 + k * 3) % spec.n_actions()).collect();
                    let tr = st.step(&acts).unwrap();
                    trace.extend(tr.observations);
                    trace.push(tr.rewards);
                    k += 1;
                }
                trace
            };
            assert_eq!(run(11), run(11));
            assert_ne!(run(11), run(12));
        }
    }

    #[test]
    fn task_and_setting_parse() {
        assert_eq!("pp".parse::<Task>().unwrap(), Task::PredatorPrey);
        assert_eq!("traffic_junction".parse::<Task>().unwrap(), Task::TrafficJunction);
        assert!("chess".parse::<Task>().is_err());
        assert_eq!("b".parse::<Setting>().unwrap(), Setting::B);
        assert_eq!(EnvSpec::new(Task::PredatorPrey, Setting::A).label(), "PP-A");
    }
}
