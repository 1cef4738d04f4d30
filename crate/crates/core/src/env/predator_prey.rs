use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvSpec, Outcome, StepInfo, TaskParams};

/// Up, down, left, right, stay.
pub(super) const N_ACTIONS: usize = 5;
const MOVES: [(isize, isize); N_ACTIONS] = [(0, -1), (0, 1), (-1, 0), (1, 0), (0, 0)];

const STEP_PENALTY: f64 = -0.05;

/// Own position, reached flag, then the prey-occupancy window when the
/// vision radius is nonzero.
pub(super) fn obs_dim(vision: usize) -> usize {
    3 + if vision > 0 { (2 * vision + 1).pow(2) } else { 0 }
}

/// Predators on a `D × D` grid hunting a prey that never moves.
#[derive(Clone, Debug)]
pub struct PredatorPrey {
    pub(super) spec: EnvSpec,
    pub(super) t: usize,
    pub(super) done: bool,
    grid: usize,
    vision: usize,
    predators: Vec<(usize, usize)>,
    prey: (usize, usize),
    reached: Vec<bool>,
}

impl PredatorPrey {
    pub(super) fn new(spec: EnvSpec, seed: u64) -> Self {
        let TaskParams::PredatorPrey { grid, vision } = spec.params else {
            unreachable!("validated by reset")
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Distinct cells for the prey and every predator.
        let mut cells: Vec<(usize, usize)> = Vec::with_capacity(spec.n_agents + 1);
        while cells.len() < spec.n_agents + 1 {
            let c = (rng.random_range(0..grid), rng.random_range(0..grid));
            if !cells.contains(&c) {
                cells.push(c);
            }
        }
        let prey = cells.pop().expect("non-empty");
        PredatorPrey {
            spec,
            t: 0,
            done: false,
            grid,
            vision,
            predators: cells,
            prey,
            reached: vec![false; spec.n_agents],
        }
    }

    pub fn predators(&self) -> &[(usize, usize)] {
        &self.predators
    }

    pub fn prey(&self) -> (usize, usize) {
        self.prey
    }

    pub fn reached(&self, i: usize) -> bool {
        self.reached[i]
    }

    pub fn place_predator(&mut self, i: usize, pos: (usize, usize)) {
        self.predators[i] = pos;
    }

    pub(super) fn advance(&mut self, actions: &[usize]) -> (Vec<f64>, StepInfo) {
        let g = self.grid as isize;
        let mut newly = 0;
        for (i, &a) in actions.iter().enumerate() {
            if self.reached[i] {
                continue;
            }
            let (dx, dy) = MOVES[a];
            let (x, y) = self.predators[i];
            let nx = (x as isize + dx).clamp(0, g - 1) as usize;
            let ny = (y as isize + dy).clamp(0, g - 1) as usize;
            self.predators[i] = (nx, ny);
            if (nx, ny) == self.prey {
                self.reached[i] = true;
                newly += 1;
            }
        }
        self.t += 1;
        self.done = self.reached.iter().all(|&r| r) || self.t >= self.spec.t_max;
        let rewards = self.reached.iter().map(|&r| if r { 0.0 } else { STEP_PENALTY }).collect();
        (
            rewards,
            StepInfo {
                newly_completed: newly,
                collision: false,
            },
        )
    }

    pub(super) fn observe(&self, i: usize) -> Vec<f64> {
        let scale = (self.grid - 1) as f64;
        let (x, y) = self.predators[i];
        let mut o = vec![x as f64 / scale, y as f64 / scale, f64::from(u8::from(self.reached[i]))];
        if self.vision > 0 {
            let v = self.vision as isize;
            for dy in -v..=v {
                for dx in -v..=v {
                    let cx = x as isize + dx;
                    let cy = y as isize + dy;
                    let seen = cx >= 0 && cy >= 0 && (cx as usize, cy as usize) == self.prey;
                    o.push(f64::from(u8::from(seen)));
                }
            }
        }
        o
    }

    pub(super) fn outcome(&self) -> Outcome {
        Outcome {
            length: self.t,
            success: self.reached.iter().all(|&r| r),
        }
    }

    pub(super) fn render(&self) -> String {
        let mut grid = vec![vec!['.'; self.grid]; self.grid];
        grid[self.prey.1][self.prey.0] = 'P';
        for (i, &(x, y)) in self.predators.iter().enumerate() {
            grid[y][x] = if self.reached[i] {
                '#'
            } else {
                char::from_digit((i % 10) as u32, 10).unwrap_or('A')
            };
        }
        let mut s = format!("t={}\n", self.t);
        for row in grid {
            s.extend(row);
            s.push('\n');
        }
        s
    }
}
