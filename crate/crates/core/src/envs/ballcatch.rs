use super::render::{Camera, Scene};
use super::{EnvShiftSpec, Environment};
use crate::autodiff::Rng;

/// Ball launch state `(bx, by, vx, vy)`.
pub const BALL_INITIAL: [f64; 4] = [8.0, 1.0, -4.5, 7.85];

/// A robot on the ground line catching a ballistic ball, observed through
/// a side-view camera.
#[derive(Clone, Debug, PartialEq)]
pub struct BallCatch {
    pub horizon: usize,
    pub dt: f64,
    pub gravity: f64,
    pub effort_weight: f64,
    pub terminal_weight: f64,
    pub initial: (f64, f64),
    pub image_size: usize,
    /// Per-pixel noise standard deviation.
    pub pixel_noise: f64,
    pub backdrop: super::Backdrop,
    pub camera: Camera,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BallCatchState {
    pub d: f64,
    pub bx: f64,
    pub by: f64,
    pub vx: f64,
    pub vy: f64,
}

impl BallCatchState {
    pub fn launch(d: f64) -> Self {
        let [bx, by, vx, vy] = BALL_INITIAL;
        BallCatchState { d, bx, by, vx, vy }
    }
}

impl Default for BallCatch {
    fn default() -> Self {
        BallCatch {
            horizon: 25,
            dt: 1.0 / 15.0,
            gravity: 9.81,
            effort_weight: 0.01,
            terminal_weight: 100.0,
            initial: (-2.0, 2.0),
            image_size: 16,
            pixel_noise: 0.0,
            backdrop: super::Backdrop::Training,
            camera: Camera::default(),
        }
    }
}

impl BallCatch {
    pub fn with_shift(shift: &EnvShiftSpec, image_size: usize) -> Self {
        let mut env = BallCatch {
            pixel_noise: shift.sensor_noise,
            backdrop: shift.backdrop,
            image_size,
            ..BallCatch::default()
        };
        if let Some(iv) = shift.initial {
            env.initial = iv;
        }
        env
    }

    pub fn scene(s: &BallCatchState) -> Scene {
        Scene {
            ball: Some((s.bx, s.by)),
            robot: Some(s.d),
        }
    }

    pub fn render(&self, s: &BallCatchState, noise_std: f64, rng: &mut Rng) -> Vec<f64> {
        self.camera
            .render(&Self::scene(s), self.backdrop, self.image_size, noise_std, rng)
    }
}

impl Environment for BallCatch {
    type State = BallCatchState;

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn state_dim(&self) -> usize {
        5
    }

    fn obs_shape(&self) -> Vec<usize> {
        vec![3, self.image_size, self.image_size]
    }

    fn sample_initial(&self, rng: &mut Rng) -> BallCatchState {
        BallCatchState::launch(rng.uniform(self.initial.0, self.initial.1))
    }

    fn observe(&self, s: &BallCatchState, rng: &mut Rng) -> Vec<f64> {
        self.render(s, self.pixel_noise, rng)
    }

    fn step(&self, s: &BallCatchState, u: &[f64]) -> BallCatchState {
        BallCatchState {
            d: s.d + self.dt * u[0],
            bx: s.bx + self.dt * s.vx,
            by: s.by + self.dt * s.vy,
            vx: s.vx,
            vy: s.vy - self.dt * self.gravity,
        }
    }

    fn stage_cost(&self, _s: &BallCatchState, u: &[f64], _t: usize) -> f64 {
        self.effort_weight * u[0].abs()
    }

    fn terminal_cost(&self, s: &BallCatchState) -> f64 {
        self.terminal_weight * self.final_distance(s)
    }

    fn state_vector(&self, s: &BallCatchState) -> Vec<f64> {
        vec![s.d, s.bx, s.by, s.vx, s.vy]
    }

    fn final_distance(&self, s: &BallCatchState) -> f64 {
        (s.d - s.bx).abs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step() {
        let env = BallCatch::default();
        let s = env.step(&BallCatchState::launch(0.0), &[1.0]);
        assert!((s.d - 1.0 / 15.0).abs() < 1e-15);
        assert!((s.bx - 7.7).abs() < 1e-12);
        assert!((s.by - (1.0 + 7.85 / 15.0)).abs() < 1e-12);
        assert_eq!(s.vx, -4.5);
        assert!((s.vy - (7.85 - 9.81 / 15.0)).abs() < 1e-12);
        assert_eq!(env.step(&BallCatchState::launch(0.3), &[0.0]).d, 0.3);
    }

    #[test]
    fn costs() {
        let env = BallCatch::default();
        let s = BallCatchState::launch(0.0);
        assert_eq!(env.stage_cost(&s, &[0.0], 0), 0.0);
        assert!((env.stage_cost(&s, &[2.0], 3) - 0.02).abs() < 1e-15);
        let end = BallCatchState { d: 0.6, bx: 0.5, ..s };
        assert!((env.terminal_cost(&end) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn ball_is_above_ground_through_the_horizon() {
        let env = BallCatch::default();
        let mut s = BallCatchState::launch(0.0);
        let mut heights = vec![s.by];
        for _ in 0..30 {
            s = env.step(&s, &[0.0]);
            heights.push(s.by);
        }
        assert!((heights[25] - (1.0 + 25.0 * 7.85 / 15.0 - 9.81 * 300.0 / 225.0)).abs() < 1e-9);
        assert!(heights[..=26].iter().all(|h| *h >= 0.0));
        assert!((heights[26] - 0.437).abs() < 1e-3, "{}", heights[26]);
        let landing = heights.iter().position(|h| *h < 0.0).unwrap();
        assert_eq!(landing, 27);
    }

    #[test]
    fn observation_shape() {
        let env = BallCatch::default();
        let y = env.observe(&BallCatchState::launch(0.0), &mut Rng::new(0));
        assert_eq!(y.len(), 3 * 16 * 16);
        assert_eq!(env.obs_shape(), vec![3, 16, 16]);
    }
}
