//! Simulated environments and their test-time distribution shifts.

mod ballcatch;
mod lava;
pub mod render;

pub use ballcatch::{BallCatch, BallCatchState, BALL_INITIAL};
pub use lava::{Lava, LavaState};
pub use render::{Backdrop, Camera};

use crate::autodiff::Rng;

/// A finite-horizon POMDP with explicit state, sensor and cost.
pub trait Environment: Sync {
    type State: Clone + Send + Sync + std::fmt::Debug;

    fn horizon(&self) -> usize;
    /// Length of [`state_vector`](Self::state_vector).
    fn state_dim(&self) -> usize;
    /// Shape of one observation, e.g. `[2]` or `[3, 16, 16]`.
    fn obs_shape(&self) -> Vec<usize>;
    fn action_dim(&self) -> usize {
        1
    }
    fn sample_initial(&self, rng: &mut Rng) -> Self::State;
    /// Flattened observation of `s`.
    fn observe(&self, s: &Self::State, rng: &mut Rng) -> Vec<f64>;
    fn step(&self, s: &Self::State, u: &[f64]) -> Self::State;
    fn stage_cost(&self, s: &Self::State, u: &[f64], t: usize) -> f64;
    fn terminal_cost(&self, s: &Self::State) -> f64;
    fn state_vector(&self, s: &Self::State) -> Vec<f64>;
    /// Task-specific miss distance at the end of an episode.
    fn final_distance(&self, s: &Self::State) -> f64;
}

/// A test-time perturbation of the training distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvShiftSpec {
    /// Sensor noise: the variance σ² for lava, the per-pixel standard
    /// deviation σ for ball catching.
    pub sensor_noise: f64,
    pub backdrop: Backdrop,
    /// Interval for the initial robot position; `None` keeps the training set.
    pub initial: Option<(f64, f64)>,
}

impl EnvShiftSpec {
    pub fn lava_training() -> Self {
        EnvShiftSpec {
            sensor_noise: 1e-4,
            backdrop: Backdrop::Training,
            initial: None,
        }
    }

    pub fn ballcatch_training() -> Self {
        EnvShiftSpec {
            sensor_noise: 0.0,
            backdrop: Backdrop::Training,
            initial: None,
        }
    }
}

/// `N` rollouts of length `T`, stored rollout-major.
///
/// `states` and `state_vecs` have `T+1` entries per rollout, every other
/// per-step array has `T`.
#[derive(Clone, Debug)]
pub struct TrajectoryBatch<S> {
    pub horizon: usize,
    pub states: Vec<Vec<S>>,
    pub state_vecs: Vec<Vec<Vec<f64>>>,
    pub observations: Vec<Vec<Vec<f64>>>,
    pub trvs: Vec<Vec<Vec<f64>>>,
    pub trv_noise: Vec<Vec<Vec<f64>>>,
    pub actions: Vec<Vec<Vec<f64>>>,
    pub action_noise: Vec<Vec<Vec<f64>>>,
    /// Stage costs `c_0..c_{T-1}` followed by the terminal cost.
    pub costs: Vec<Vec<f64>>,
    pub total_costs: Vec<f64>,
    pub final_distances: Vec<f64>,
}

impl<S> TrajectoryBatch<S> {
    pub fn len(&self) -> usize {
        self.total_costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total_costs.is_empty()
    }

    pub fn cost_mean(&self) -> f64 {
        mean(&self.total_costs)
    }

    pub fn cost_std(&self) -> f64 {
        std_dev(&self.total_costs)
    }

    /// Rows `(state_t, trv_t)` for every rollout.
    pub fn pairs_at(&self, t: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (
            self.state_vecs.iter().map(|r| r[t].clone()).collect(),
            self.trvs.iter().map(|r| r[t].clone()).collect(),
        )
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation; zero for a single sample.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}
