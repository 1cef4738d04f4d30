use std::f64::consts::FRAC_PI_4;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvSpec, Outcome, StepInfo, TaskParams};

/// Eight compass directions followed by "stay".
pub(super) const N_ACTIONS: usize = 9;
/// Own x, y, own treasure x, y, elapsed fraction.
pub(super) const OBS_DIM: usize = 5;

const STEP_PENALTY: f64 = -0.05;
const FIND_REWARD: f64 = 1.0;

/// Agents in the unit square, each knowing where its own treasure is. A
/// treasure counts as found once some agent other than its owner comes
/// within the collection radius.
#[derive(Clone, Debug)]
pub struct TreasureHunt {
    pub(super) spec: EnvSpec,
    pub(super) t: usize,
    pub(super) done: bool,
    speed: f64,
    radius: f64,
    agents: Vec<[f64; 2]>,
    treasures: Vec<[f64; 2]>,
    found: Vec<bool>,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl TreasureHunt {
    pub(super) fn new(spec: EnvSpec, seed: u64) -> Self {
        let TaskParams::TreasureHunt { speed, radius } = spec.params else {
            unreachable!("validated by reset")
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = spec.n_agents;
        let mut point = || [rng.random::<f64>(), rng.random::<f64>()];
        let agents: Vec<[f64; 2]> = (0..n).map(|_| point()).collect();
        // Treasures never start inside another agent's collection radius.
        let treasures = (0..n)
            .map(|i| loop {
                let p = point();
                if (0..n).all(|j| j == i || dist(agents[j], p) > radius) {
                    break p;
                }
            })
            .collect();
        TreasureHunt {
            spec,
            t: 0,
            done: false,
            speed,
            radius,
            agents,
            treasures,
            found: vec![false; n],
        }
    }

    pub fn agents(&self) -> &[[f64; 2]] {
        &self.agents
    }

    pub fn treasures(&self) -> &[[f64; 2]] {
        &self.treasures
    }

    pub fn found(&self) -> &[bool] {
        &self.found
    }

    /// Moves agent `i` to `pos` directly; used by tests to stage scenarios.
    pub fn place_agent(&mut self, i: usize, pos: [f64; 2]) {
        self.agents[i] = [pos[0].clamp(0.0, 1.0), pos[1].clamp(0.0, 1.0)];
    }

    pub fn place_treasure(&mut self, i: usize, pos: [f64; 2]) {
        self.treasures[i] = [pos[0].clamp(0.0, 1.0), pos[1].clamp(0.0, 1.0)];
    }

    pub(super) fn advance(&mut self, actions: &[usize]) -> (Vec<f64>, StepInfo) {
        for (pos, &a) in self.agents.iter_mut().zip(actions) {
            if a < 8 {
                let angle = a as f64 * FRAC_PI_4;
                pos[0] = (pos[0] + self.speed * angle.cos()).clamp(0.0, 1.0);
                pos[1] = (pos[1] + self.speed * angle.sin()).clamp(0.0, 1.0);
            }
        }
        let mut newly = 0;
        for i in 0..self.treasures.len() {
            if self.found[i] {
                continue;
            }
            let hit = self
                .agents
                .iter()
                .enumerate()
                .any(|(j, &p)| j != i && dist(p, self.treasures[i]) <= self.radius);
            if hit {
                self.found[i] = true;
                newly += 1;
            }
        }
        self.t += 1;
        self.done = self.found.iter().all(|&f| f) || self.t >= self.spec.t_max;
        let r = STEP_PENALTY + FIND_REWARD * newly as f64;
        (
            vec![r; self.agents.len()],
            StepInfo {
                newly_completed: newly,
                collision: false,
            },
        )
    }

    pub(super) fn observe(&self, i: usize) -> Vec<f64> {
        let [x, y] = self.agents[i];
        let [tx, ty] = self.treasures[i];
        vec![x, y, tx, ty, self.t as f64 / self.spec.t_max as f64]
    }

    pub(super) fn outcome(&self) -> Outcome {
        Outcome {
            length: self.t,
            success: self.found.iter().all(|&f| f),
        }
    }

    pub(super) fn render(&self) -> String {
        const W: usize = 20;
        let mut grid = vec![vec!['.'; W]; W];
        let cell = |p: [f64; 2]| {
            let c = ((p[0] * W as f64) as usize).min(W - 1);
            let r = ((p[1] * W as f64) as usize).min(W - 1);
            (r, c)
        };
        for (i, &p) in self.treasures.iter().enumerate() {
            let (r, c) = cell(p);
            grid[r][c] = if self.found[i] { '*' } else { 'T' };
        }
        for (i, &p) in self.agents.iter().enumerate() {
            let (r, c) = cell(p);
            grid[r][c] = char::from_digit((i % 10) as u32, 10).unwrap_or('A');
        }
        let mut s = format!("t={} found={:?}\n", self.t, self.found);
        for row in grid.iter().rev() {
            s.extend(row);
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::super::{reset, EnvState, Setting, Task};
    use super::*;

    fn th(spec: &EnvSpec, seed: u64) -> TreasureHunt {
        match reset(spec, seed).unwrap().0 {
            EnvState::TreasureHunt(s) => s,
            _ => unreachable!(),
        }
    }

    #[test]
    fn observation_layout() {
        let spec = EnvSpec::new(Task::TreasureHunt, Setting::A);
        let s = th(&spec, 4);
        let o = s.observe(1);
        assert_eq!(o[..2], s.agents()[1]);
        assert_eq!(o[2..4], s.treasures()[1]);
        assert_eq!(o[4], 0.0);
    }

    #[test]
    fn moves_have_speed_v() {
        let spec = EnvSpec::new(Task::TreasureHunt, Setting::A);
        let mut s = th(&spec, 4);
        for a in 0..8 {
            s.place_agent(0, [0.5, 0.5]);
            s.advance(&[a, 8, 8]);
            assert!((dist(s.agents()[0], [0.5, 0.5]) - 0.15).abs() < 1e-12);
        }
        s.place_agent(0, [0.5, 0.5]);
        s.advance(&[8, 8, 8]);
        assert_eq!(s.agents()[0], [0.5, 0.5]);
    }

    #[test]
    fn owner_cannot_collect_own_treasure() {
        let spec = EnvSpec::new(Task::TreasureHunt, Setting::A);
        let mut s = th(&spec, 8);
        s.place_agent(1, [0.9, 0.9]);
        s.place_agent(2, [0.9, 0.1]);
        s.place_treasure(0, [0.2, 0.2]);
        s.place_agent(0, [0.2, 0.2]);
        let (r, info) = s.advance(&[8, 8, 8]);
        assert!(!s.found()[0]);
        assert_eq!(info.newly_completed, 0);
        assert_eq!(r, vec![-0.05; 3]);

        s.place_agent(1, [0.25, 0.2]);
        let (r, info) = s.advance(&[8, 8, 8]);
        assert!(s.found()[0]);
        assert_eq!(info.newly_completed, 1);
        assert_eq!(r, vec![0.95; 3]);
    }

    #[test]
    fn finishing_all_treasures_ends_episode() {
        let spec = EnvSpec::new(Task::TreasureHunt, Setting::A);
        let mut s = th(&spec, 2);
        for _ in 0..6 {
            s.advance(&[8, 8, 8]);
        }
        assert!(!s.done);
        // Park every treasure next to a non-owner agent.
        for i in 0..3 {
            let p = s.agents()[(i + 1) % 3];
            s.place_treasure(i, p);
        }
        s.advance(&[8, 8, 8]);
        assert!(s.done);
        assert_eq!(s.outcome(), Outcome { length: 7, success: true });
    }

    #[test]
    fn solo_agent_never_finishes() {
        let mut spec = EnvSpec::new(Task::TreasureHunt, Setting::A);
        spec.n_agents = 1;
        for seed in 0..20 {
            let (mut st, _) = reset(&spec, seed).unwrap();
            let mut k = 0;
            while !st.is_done() {
                st.step(&[k % 9]).unwrap();
                k += 1;
            }
            assert_eq!(st.outcome().length, spec.t_max);
            assert!(!st.outcome().success);
        }
    }

    #[test]
    fn no_treasure_starts_found() {
        let spec = EnvSpec::new(Task::TreasureHunt, Setting::B);
        for seed in 0..50 {
            let s = th(&spec, seed);
            for i in 0..spec.n_agents {
                for j in 0..spec.n_agents {
                    if i != j {
                        assert!(dist(s.agents()[j], s.treasures()[i]) > 0.1);
                    }
                }
            }
        }
    }
}
