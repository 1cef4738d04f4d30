use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvSpec, Outcome, StepInfo, TaskParams};

/// Gas, stay.
pub(super) const N_ACTIONS: usize = 2;
const GAS: usize = 0;

const COLLISION_PENALTY: f64 = -10.0;
const TIME_PENALTY: f64 = -0.01;
const ROUTES: usize = 2;

/// One-hot road cell, route one-hot, elapsed fraction.
pub(super) fn obs_dim(grid: usize) -> usize {
    road_cells(grid) + ROUTES + 1
}

fn road_cells(grid: usize) -> usize {
    2 * grid - 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Car {
    /// 0 runs west to east along the middle row, 1 north to south along the
    /// middle column.
    pub route: usize,
    /// Cells travelled along the route; the car leaves on reaching the grid size.
    pub pos: usize,
    /// Steps since the car entered.
    pub age: usize,
}

/// Two one-lane roads crossing in the middle of a `D × D` grid. Every car
/// drives straight through on its route and only sees its own location.
#[derive(Clone, Debug)]
pub struct TrafficJunction {
    pub(super) spec: EnvSpec,
    pub(super) t: usize,
    pub(super) done: bool,
    grid: usize,
    p_arrive: f64,
    slots: Vec<Option<Car>>,
    collided: bool,
    rng: ChaCha8Rng,
}

impl TrafficJunction {
    pub(super) fn new(spec: EnvSpec, seed: u64) -> Self {
        let TaskParams::TrafficJunction { grid, p_arrive } = spec.params else {
            unreachable!("validated by reset")
        };
        let mut s = TrafficJunction {
            spec,
            t: 0,
            done: false,
            grid,
            p_arrive,
            slots: vec![None; spec.n_agents],
            collided: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.arrivals();
        s
    }

    pub fn present(&self, i: usize) -> bool {
        self.slots[i].is_some()
    }

    /// Whether the car in slot `i` entered on the last step.
    pub fn fresh(&self, i: usize) -> bool {
        matches!(self.slots[i], Some(c) if c.age == 0)
    }

    pub fn car(&self, i: usize) -> Option<Car> {
        self.slots[i]
    }

    pub fn collided(&self) -> bool {
        self.collided
    }

    pub fn place_car(&mut self, i: usize, car: Option<Car>) {
        self.slots[i] = car;
    }

    /// Index of the road cell a car occupies; the crossing is shared.
    fn cell(&self, car: Car) -> usize {
        let c = self.grid / 2;
        match (car.route, car.pos) {
            (0, p) => p,
            (_, p) if p < c => self.grid + p,
            (_, p) if p == c => c,
            (_, p) => self.grid + p - 1,
        }
    }

    fn arrivals(&mut self) {
        for route in 0..ROUTES {
            // Always draw so the stream does not depend on occupancy.
            let arrive = self.rng.random_bool(self.p_arrive);
            let entry_taken = self.slots.iter().flatten().any(|c| c.route == route && c.pos == 0);
            if !arrive || entry_taken {
                continue;
            }
            if let Some(slot) = self.slots.iter_mut().find(|s| s.is_none()) {
                *slot = Some(Car { route, pos: 0, age: 0 });
            }
        }
    }

    pub(super) fn advance(&mut self, actions: &[usize]) -> (Vec<f64>, StepInfo) {
        for (slot, &a) in self.slots.iter_mut().zip(actions) {
            if let Some(car) = slot {
                car.age += 1;
                if a == GAS {
                    car.pos += 1;
                    if car.pos >= self.grid {
                        *slot = None;
                    }
                }
            }
        }
        let mut occupancy = vec![0usize; road_cells(self.grid)];
        for car in self.slots.iter().flatten() {
            occupancy[self.cell(*car)] += 1;
        }
        let mut rewards = vec![0.0; self.slots.len()];
        let mut collision = false;
        for (r, slot) in rewards.iter_mut().zip(&self.slots) {
            if let Some(car) = slot {
                *r = TIME_PENALTY * car.age as f64;
                if occupancy[self.cell(*car)] > 1 {
                    *r += COLLISION_PENALTY;
                    collision = true;
                }
            }
        }
        self.collided |= collision;
        self.t += 1;
        self.done = self.t >= self.spec.t_max;
        if !self.done {
            self.arrivals();
        }
        (
            rewards,
            StepInfo {
                newly_completed: 0,
                collision,
            },
        )
    }

    pub(super) fn observe(&self, i: usize) -> Vec<f64> {
        let mut o = vec![0.0; obs_dim(self.grid)];
        if let Some(car) = self.slots[i] {
            let cells = road_cells(self.grid);
            o[self.cell(car)] = 1.0;
            o[cells + car.route] = 1.0;
            o[cells + ROUTES] = self.t as f64 / self.spec.t_max as f64;
        }
        o
    }

    pub(super) fn outcome(&self) -> Outcome {
        Outcome {
            length: self.t,
            success: !self.collided,
        }
    }

    pub(super) fn render(&self) -> String {
        let c = self.grid / 2;
        let mut grid = vec![vec![' '; self.grid]; self.grid];
        for k in 0..self.grid {
            grid[c][k] = '.';
            grid[k][c] = '.';
        }
        for (i, car) in self.slots.iter().enumerate() {
            if let Some(car) = car {
                let (x, y) = if car.route == 0 { (car.pos, c) } else { (c, car.pos) };
                grid[y][x] = if grid[y][x] == '.' {
                    char::from_digit((i % 10) as u32, 10).unwrap_or('A')
                } else {
                    'X'
                };
            }
        }
        let mut s = format!("t={} collided={}\n", self.t, self.collided);
        for row in grid {
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

    fn tj(spec: &EnvSpec, seed: u64) -> TrafficJunction {
        match reset(spec, seed).unwrap().0 {
            EnvState::TrafficJunction(s) => s,
            _ => unreachable!(),
        }
    }

    fn empty(setting: Setting) -> TrafficJunction {
        let mut spec = EnvSpec::new(Task::TrafficJunction, setting);
        spec.params = TaskParams::TrafficJunction {
            grid: if setting == Setting::A { 7 } else { 14 },
            p_arrive: 0.0,
        };
        tj(&spec, 0)
    }

    #[test]
    fn road_cells_are_distinct_except_crossing() {
        let s = empty(Setting::A);
        let mut seen = vec![0; road_cells(7)];
        for route in 0..2 {
            for pos in 0..7 {
                seen[s.cell(Car { route, pos, age: 0 })] += 1;
            }
        }
        assert_eq!(seen.iter().filter(|&&k| k == 2).count(), 1);
        assert_eq!(seen[3], 2);
        assert!(seen.iter().all(|&k| k >= 1));
    }

    #[test]
    fn two_cars_entering_crossing_collide() {
        let mut s = empty(Setting::A);
        s.place_car(0, Some(Car { route: 0, pos: 2, age: 2 }));
        s.place_car(1, Some(Car { route: 1, pos: 2, age: 2 }));
        let (r, info) = s.advance(&[GAS, GAS, 1, 1, 1]);
        assert!(info.collision);
        assert!(s.collided());
        assert!((r[0] - (-10.0 - 0.03)).abs() < 1e-12);
        assert!((r[1] - (-10.0 - 0.03)).abs() < 1e-12);
        assert_eq!(r[2], 0.0);
        while !s.done {
            s.advance(&[1; 5]);
        }
        assert!(!s.outcome().success);
    }

    #[test]
    fn rear_end_collision_on_same_route() {
        let mut s = empty(Setting::A);
        s.place_car(0, Some(Car { route: 0, pos: 4, age: 4 }));
        s.place_car(1, Some(Car { route: 0, pos: 3, age: 3 }));
        let (_, info) = s.advance(&[1, GAS, 1, 1, 1]);
        assert!(info.collision);
    }

    #[test]
    fn cars_leave_at_the_far_edge() {
        let mut s = empty(Setting::A);
        s.place_car(2, Some(Car { route: 1, pos: 6, age: 6 }));
        assert!(s.present(2));
        let (r, _) = s.advance(&[1, 1, GAS, 1, 1]);
        assert!(!s.present(2));
        assert_eq!(r, vec![0.0; 5]);
        assert_eq!(s.observe(2), vec![0.0; obs_dim(7)]);
    }

    #[test]
    fn time_penalty_grows_with_age() {
        let mut s = empty(Setting::A);
        s.place_car(0, Some(Car { route: 0, pos: 0, age: 0 }));
        let mut last = 0.0;
        for k in 1..=3 {
            let (r, _) = s.advance(&[1; 5]);
            assert!((r[0] - (-0.01 * k as f64)).abs() < 1e-12);
            assert!(r[0] < last);
            last = r[0];
        }
    }

    #[test]
    fn no_collision_is_success() {
        let s = empty(Setting::B);
        let mut st = EnvState::TrafficJunction(s);
        while !st.is_done() {
            st.step(&[1; 10]).unwrap();
        }
        assert_eq!(st.outcome(), Outcome { length: 40, success: true });
    }

    #[test]
    fn occupancy_is_capped_and_entries_not_doubled() {
        let spec = EnvSpec::new(Task::TrafficJunction, Setting::A);
        for seed in 0..30 {
            let (mut st, _) = reset(&spec, seed).unwrap();
            while !st.is_done() {
                st.step(&[1; 5]).unwrap();
                let EnvState::TrafficJunction(s) = &st else { unreachable!() };
                let mut entries = [0; 2];
                for car in s.slots.iter().flatten() {
                    if car.pos == 0 {
                        entries[car.route] += 1;
                    }
                }
                assert!(entries.iter().all(|&e| e <= 1));
            }
        }
    }

    #[test]
    fn observation_is_location_route_and_time() {
        let mut s = empty(Setting::A);
        s.place_car(1, Some(Car { route: 1, pos: 5, age: 1 }));
        s.advance(&[1; 5]);
        let o = s.observe(1);
        assert_eq!(o.len(), 16);
        assert_eq!(o[7 + 5 - 1], 1.0);
        assert_eq!(o[13..15], [0.0, 1.0]);
        assert!((o[15] - 1.0 / 20.0).abs() < 1e-12);
        assert_eq!(o.iter().filter(|&&v| v == 1.0).count(), 2);
    }

    #[test]
    fn arrivals_happen() {
        let spec = EnvSpec::new(Task::TrafficJunction, Setting::A);
        let mut cars = 0;
        for seed in 0..20 {
            let (mut st, _) = reset(&spec, seed).unwrap();
            while !st.is_done() {
                st.step(&[GAS; 5]).unwrap();
                cars += (0..5).filter(|&i| st.present(i)).count();
            }
        }
        assert!(cars > 0);
    }
}
