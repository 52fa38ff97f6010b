//! The score-function estimator against a problem with a closed-form
//! expected cost: one step, a fixed observation, linear Gaussian encoder and
//! controller, and a quadratic cost.

use tdpg_core::autodiff::{Rng, Tensor};
use tdpg_core::envs::Environment;
use tdpg_core::nets::{Activation, Dense, GaussianNet, Mlp, PolicyParams};
use tdpg_core::tdpg::{pg_gradient, rollout_batch, PgOptions, RolloutSpec};

const TARGET: f64 = 2.0;
const Y: f64 = 1.0;

struct OneStep;

impl Environment for OneStep {
    type State = f64;

    fn horizon(&self) -> usize {
        1
    }
    fn state_dim(&self) -> usize {
        1
    }
    fn obs_shape(&self) -> Vec<usize> {
        vec![1]
    }
    fn sample_initial(&self, _: &mut Rng) -> f64 {
        Y
    }
    fn observe(&self, s: &f64, _: &mut Rng) -> Vec<f64> {
        vec![*s]
    }
    fn step(&self, s: &f64, _: &[f64]) -> f64 {
        *s
    }
    fn stage_cost(&self, _: &f64, u: &[f64], _: usize) -> f64 {
        (u[0] - TARGET).powi(2)
    }
    fn terminal_cost(&self, _: &f64) -> f64 {
        0.0
    }
    fn state_vector(&self, s: &f64) -> Vec<f64> {
        vec![*s]
    }
    fn final_distance(&self, _: &f64) -> f64 {
        0.0
    }
}

fn linear(weight: [[f64; 2]; 2], rows: usize, bias: [f64; 2]) -> Mlp {
    let flat: Vec<f64> = weight[..rows].iter().flatten().copied().collect();
    Mlp {
        layers: vec![Dense {
            weight: Tensor::new(vec![rows, 2], flat).unwrap(),
            bias: Tensor::vector(bias.to_vec()),
        }],
        hidden: Activation::Identity,
    }
}

/// Parameters in block order: q weight (rows y, x̃₋₁; columns mean, log-std),
/// q bias, π weight, π bias.
fn policy(theta: &[f64; 10]) -> PolicyParams {
    let t = theta;
    let q = linear([[t[0], t[1]], [t[2], t[3]]], 2, [t[4], t[5]]);
    let pi = linear([[t[6], t[7]], [0.0, 0.0]], 1, [t[8], t[9]]);
    PolicyParams {
        q: vec![GaussianNet::new("q/t0", Vec::new(), q).unwrap()],
        pi: vec![GaussianNet::new("pi/t0", Vec::new(), pi).unwrap()],
        time_varying: true,
        trv_dim: 1,
        action_dim: 1,
    }
}

/// `x̃ ~ N(m, s²)` with `m = w·y + b`, `u = a·x̃ + b' + exp(c·x̃ + d)·ε`, so
/// `E(u − g)² = (a·m + b' − g)² + a²s² + exp(2d + 2cm + 2c²s²)`.
fn expected_cost(t: &[f64; 10]) -> f64 {
    let m = t[0] * Y + t[4];
    let s = (t[1] * Y + t[5]).exp();
    let (a, c, b, d) = (t[6], t[7], t[8], t[9]);
    (a * m + b - TARGET).powi(2) + a * a * s * s + (2.0 * d + 2.0 * c * m + 2.0 * c * c * s * s).exp()
}

fn closed_form_gradient(theta: &[f64; 10]) -> Vec<f64> {
    let h = 1e-6;
    (0..10)
        .map(|i| {
            let (mut up, mut down) = (*theta, *theta);
            up[i] += h;
            down[i] -= h;
            (expected_cost(&up) - expected_cost(&down)) / (2.0 * h)
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn closed_form_matches_sampling() {
    let theta = [0.4, -0.3, 0.2, 0.1, 0.1, -0.2, 0.8, 0.15, 0.3, -0.5];
    let p = policy(&theta);
    let spec = RolloutSpec {
        n: 200_000,
        seed: 7,
        stream: 0,
        chunk: 1000,
        deterministic: false,
    };
    let b = rollout_batch(&OneStep, &p, &spec).unwrap();
    let mc = b.cost_mean();
    let exact = expected_cost(&theta);
    assert!((mc - exact).abs() < 0.02 * exact, "{mc} vs {exact}");
}

#[test]
fn million_rollout_estimate_within_two_percent() {
    let theta = [0.4, -0.3, 0.2, 0.1, 0.1, -0.2, 0.8, 0.15, 0.3, -0.5];
    let p = policy(&theta);
    let exact = closed_form_gradient(&theta);
    let opts = PgOptions {
        baseline: true,
        reward_to_go: false,
        chunk: 1000,
    };
    const BATCHES: u64 = 10;
    let mut est = vec![0.0; 10];
    for k in 0..BATCHES {
        let spec = RolloutSpec {
            n: 100_000,
            seed: 11,
            stream: k,
            chunk: 1000,
            deterministic: false,
        };
        let batch = rollout_batch(&OneStep, &p, &spec).unwrap();
        let g = pg_gradient(&p, &batch, &opts).unwrap();
        let flat: Vec<f64> = g.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        for (e, v) in est.iter_mut().zip(flat) {
            *e += v / BATCHES as f64;
        }
    }
    let diff: Vec<f64> = est.iter().zip(&exact).map(|(a, b)| a - b).collect();
    let rel = norm(&diff) / norm(&exact);
    assert!(rel <= 0.02, "relative error {rel:.4}\nestimate {est:?}\nexact    {exact:?}");
    // The previous-TRV input is zero at the first step, so its weights get
    // no gradient from either route.
    assert_eq!((est[2], est[3]), (0.0, 0.0));
}
