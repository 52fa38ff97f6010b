//! The pathwise MI gradient and the combined update against finite
//! differences of an independently unrolled objective.

use tdpg_core::autodiff::{Graph, Rng, Tensor};
use tdpg_core::envs::{Lava, TrajectoryBatch};
use tdpg_core::mine::{mine_grad_wrt_policy, MineEstimator};
use tdpg_core::nets::{build_lava_nets, MineCritic, PolicyParams};
use tdpg_core::tdpg::{
    marginal_permutations, pg_gradient, rollout_batch, tdpg_gradient, PgOptions, RolloutSpec,
};

fn setup(n: usize, critics: usize) -> (PolicyParams, TrajectoryBatch<tdpg_core::envs::LavaState>, Vec<MineEstimator>) {
    let params = build_lava_nets(2, 5, &mut Rng::new(3)).unwrap();
    let spec = RolloutSpec {
        n,
        seed: 5,
        stream: 0,
        chunk: 4,
        deterministic: false,
    };
    let batch = rollout_batch(&Lava::default(), &params, &spec).unwrap();
    let mut rng = Rng::new(9);
    let estimators = (0..critics)
        .map(|t| MineEstimator::new(MineCritic::init(2, 2, 8, &mut rng), t, 1e-3, 2, 0.0))
        .collect();
    (params, batch, estimators)
}

/// `Σₖ DVₖ` with TRVs rebuilt from the stored noises, evaluated without any
/// gradient machinery beyond single forward passes.
fn unrolled_objective<S>(
    params: &PolicyParams,
    batch: &TrajectoryBatch<S>,
    estimators: &[MineEstimator],
    perms: &[Vec<usize>],
) -> f64 {
    let n = batch.len();
    let horizon = batch.horizon;
    let mut prev = vec![vec![0.0; params.trv_dim]; n];
    let mut total = 0.0;
    let score = |critic: &MineCritic, states: &[Vec<f64>], trvs: &[Vec<f64>]| -> Vec<f64> {
        let mut g = Graph::new();
        let v = critic.bind(&mut g, false);
        let s = g.constant(Tensor::from_rows(states).unwrap());
        let x = g.constant(Tensor::from_rows(trvs).unwrap());
        let out = critic.forward(&mut g, &v, s, x).unwrap();
        g.value(out).data().to_vec()
    };
    let dv = |critic: &MineCritic, states: &[Vec<f64>], trvs: &[Vec<f64>], perm: &[usize]| -> f64 {
        let joint = score(critic, states, trvs);
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&j| trvs[j].clone()).collect();
        let marg = score(critic, states, &shuffled);
        let mean_joint = joint.iter().sum::<f64>() / n as f64;
        let mean_exp = marg.iter().map(|v| v.exp()).sum::<f64>() / n as f64;
        mean_joint - mean_exp.ln()
    };
    for t in 0..horizon.min(estimators.len()) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let obs: Vec<Vec<f64>> = batch.observations.iter().map(|r| r[t].clone()).collect();
        let o = g.constant(Tensor::from_rows(&obs).unwrap());
        let p = g.constant(Tensor::from_rows(&prev).unwrap());
        let head = params.q_forward(&mut g, &bound, t, o, p).unwrap();
        let mean = g.value(head.mean).clone();
        let log_std = g.value(head.log_std).clone();
        let d = params.trv_dim;
        let trvs: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..d)
                    .map(|k| {
                        mean.data()[i * d + k] + log_std.data()[i * d + k].exp() * batch.trv_noise[i][t][k]
                    })
                    .collect()
            })
            .collect();
        let states: Vec<Vec<f64>> = batch.state_vecs.iter().map(|r| r[t].clone()).collect();
        total += dv(&estimators[t].critic, &states, &trvs, &perms[t]);
        prev = trvs;
    }
    if estimators.len() == horizon + 1 {
        let states: Vec<Vec<f64>> = batch.state_vecs.iter().map(|r| r[horizon].clone()).collect();
        total += dv(&estimators[horizon].critic, &states, &prev, &perms[horizon]);
    }
    total
}

fn check_mi_gradient(critics: usize) {
    let (params, batch, estimators) = setup(6, critics);
    let perms = marginal_permutations(batch.len(), critics, 1, 0);
    let analytic = mine_grad_wrt_policy(&estimators, &params, &batch, &perms).unwrap();
    let h = 1e-5;
    let mut work = params.clone();
    let names: Vec<String> = params.blocks().into_iter().map(|(n, _)| n).collect();
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    for (b, name) in names.iter().enumerate() {
        if name.starts_with("pi/") {
            assert!(analytic[b].1.data().iter().all(|v| *v == 0.0), "{name} gets an MI gradient");
            continue;
        }
        for i in 0..analytic[b].1.numel() {
            let orig = work.blocks()[b].1.data()[i];
            work.blocks_mut()[b].1.data_mut()[i] = orig + h;
            let up = unrolled_objective(&work, &batch, &estimators, &perms);
            work.blocks_mut()[b].1.data_mut()[i] = orig - h;
            let down = unrolled_objective(&work, &batch, &estimators, &perms);
            work.blocks_mut()[b].1.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[b].1.data()[i];
            diff2 += (a - numeric).powi(2);
            a2 += a * a;
            n2 += numeric * numeric;
        }
    }
    assert!(a2 > 0.0);
    let rel = diff2.sqrt() / a2.max(n2).sqrt();
    assert!(rel <= 1e-4, "relative error {rel:.3e}");
}

#[test]
fn mi_gradient_matches_unrolled_differences() {
    check_mi_gradient(5);
}

#[test]
fn terminal_critic_gradient_matches_unrolled_differences() {
    check_mi_gradient(6);
}

#[test]
fn combined_gradient_is_weighted_sum() {
    let (params, batch, estimators) = setup(8, 5);
    let perms = marginal_permutations(batch.len(), 5, 2, 0);
    let opts = PgOptions {
        chunk: 3,
        ..PgOptions::default()
    };
    let beta = 0.3;
    let total = tdpg_gradient(&params, &batch, &estimators, beta, &perms, &opts).unwrap();
    let cost = pg_gradient(&params, &batch, &opts).unwrap();
    let mi = mine_grad_wrt_policy(&estimators, &params, &batch, &perms).unwrap();
    for ((name, t), ((_, c), (_, m))) in total.iter().zip(cost.iter().zip(&mi)) {
        for ((x, y), z) in t.data().iter().zip(c.data()).zip(m.data()) {
            assert!((x - (beta * y + z)).abs() <= 1e-12 * (1.0 + x.abs()), "{name}");
        }
        if name.starts_with("pi/") {
            assert!(m.data().iter().all(|v| *v == 0.0));
        }
    }
    assert!(tdpg_gradient(&params, &batch, &estimators[..3], beta, &perms, &opts).is_err());
}

#[test]
fn cost_gradient_does_not_depend_on_chunking() {
    let (params, batch, _) = setup(10, 0);
    let a = pg_gradient(&params, &batch, &PgOptions { chunk: 1, ..PgOptions::default() }).unwrap();
    let b = pg_gradient(&params, &batch, &PgOptions { chunk: 10, ..PgOptions::default() }).unwrap();
    for ((_, x), (_, y)) in a.iter().zip(&b) {
        for (u, v) in x.data().iter().zip(y.data()) {
            assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
        }
    }
}
