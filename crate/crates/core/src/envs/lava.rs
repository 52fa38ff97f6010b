use super::{EnvShiftSpec, Environment};
use crate::autodiff::Rng;

/// Double integrator on `[0, 5]` between a wall and a lava pit.
#[derive(Clone, Debug, PartialEq)]
pub struct Lava {
    pub horizon: usize,
    pub goal: [f64; 2],
    pub terminal_weight: f64,
    /// Actions are clipped to `±action_limit` before integration.
    pub action_limit: f64,
    /// Observation noise variance σ².
    pub sensor_variance: f64,
    pub initial: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LavaState {
    pub d: f64,
    pub v: f64,
    /// Set once the robot has fallen into the lava; the state never changes again.
    pub frozen: bool,
}

impl LavaState {
    pub fn new(d: f64, v: f64) -> Self {
        LavaState { d, v, frozen: false }
    }
}

pub const WALL: f64 = 0.0;
pub const LAVA_EDGE: f64 = 5.0;

impl Default for Lava {
    fn default() -> Self {
        Lava {
            horizon: 5,
            goal: [3.0, 0.0],
            terminal_weight: 100.0,
            action_limit: f64::INFINITY,
            sensor_variance: 1e-4,
            initial: (WALL, LAVA_EDGE),
        }
    }
}

impl Lava {
    pub fn with_shift(shift: &EnvShiftSpec) -> Self {
        let mut env = Lava {
            sensor_variance: shift.sensor_noise,
            ..Lava::default()
        };
        if let Some(iv) = shift.initial {
            env.initial = iv;
        }
        env
    }

    fn distance(&self, s: &LavaState) -> f64 {
        ((s.d - self.goal[0]).powi(2) + (s.v - self.goal[1]).powi(2)).sqrt()
    }
}

impl Environment for Lava {
    type State = LavaState;

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn obs_shape(&self) -> Vec<usize> {
        vec![2]
    }

    fn sample_initial(&self, rng: &mut Rng) -> LavaState {
        LavaState::new(rng.uniform(self.initial.0, self.initial.1), 0.0)
    }

    fn observe(&self, s: &LavaState, rng: &mut Rng) -> Vec<f64> {
        let sd = self.sensor_variance.sqrt();
        vec![s.d + sd * rng.normal(), s.v + sd * rng.normal()]
    }

    fn step(&self, s: &LavaState, u: &[f64]) -> LavaState {
        if s.frozen {
            return *s;
        }
        let u = u[0].clamp(-self.action_limit, self.action_limit);
        let d = s.d + s.v;
        let v = s.v + u;
        if d < WALL {
            LavaState::new(WALL, 0.0)
        } else if d > LAVA_EDGE {
            LavaState {
                d: LAVA_EDGE,
                v,
                frozen: true,
            }
        } else {
            LavaState::new(d, v)
        }
    }

    fn stage_cost(&self, s: &LavaState, _u: &[f64], _t: usize) -> f64 {
        self.distance(s)
    }

    fn terminal_cost(&self, s: &LavaState) -> f64 {
        self.terminal_weight * self.distance(s)
    }

    fn state_vector(&self, s: &LavaState) -> Vec<f64> {
        vec![s.d, s.v]
    }

    fn final_distance(&self, s: &LavaState) -> f64 {
        (s.d - self.goal[0]).abs()
    }
}
