//! Rollout collection, the score-function and task-driven policy gradients,
//! the training loop and β-sweep policy selection.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::autodiff::{Adam, AdamConfig, Checkpoint, Graph, Rng, Tensor};
use crate::envs::{mean, std_dev, Environment, TrajectoryBatch};
use crate::error::{Error, Result};
use crate::mine::{
    mine_estimate, mine_grad_wrt_policy, train_mine, MineEstimator, MineLogRow, SamplePairBatch,
    MINE_LOG_HEADER,
};
use crate::nets::{build_mine_critics, reparameterize, PolicyParams};

/// Stream tags that keep the random draws of different phases apart.
pub mod tags {
    pub const ROLLOUT: u64 = 1;
    pub const MINE_TRAIN: u64 = 2;
    pub const MINE_ESTIMATE: u64 = 3;
    pub const MARGINAL: u64 = 4;
    pub const INIT: u64 = 5;
    pub const EVAL: u64 = 6;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Algorithm {
    Pg,
    Tdpg,
}

impl Algorithm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pg" => Ok(Algorithm::Pg),
            "tdpg" => Ok(Algorithm::Tdpg),
            _ => Err(Error::Contract(format!("unknown algorithm `{s}` (pg|tdpg)"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Algorithm::Pg => "pg",
            Algorithm::Tdpg => "tdpg",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvId {
    Lava,
    BallCatch,
}

impl EnvId {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lava" => Ok(EnvId::Lava),
            "ballcatch" => Ok(EnvId::BallCatch),
            _ => Err(Error::Contract(format!("unknown env `{s}` (lava|ballcatch)"))),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EnvId::Lava => "lava",
            EnvId::BallCatch => "ballcatch",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub beta: f64,
    /// β values visited by a sweep.
    pub betas: Vec<f64>,
    pub rollouts: usize,
    pub mine_minibatch: usize,
    pub lr_policy: f64,
    pub lr_mine: f64,
    pub epochs: usize,
    pub mine_epochs_first: usize,
    pub mine_epochs: usize,
    /// Gradient-denominator EMA weight on the previous value.
    pub mine_ema_alpha: f64,
    /// Smoothing of reported MI estimates; `None` reports raw values.
    pub value_ema_alpha: Option<f64>,
    pub mine_hidden: usize,
    pub mine_parallel: bool,
    /// Adds a critic pairing the terminal state with the last TRV.
    pub terminal_mi: bool,
    pub trv_dim: usize,
    pub cost_cap: f64,
    pub seed: u64,
    pub baseline: bool,
    pub reward_to_go: bool,
    /// Per-block gradient norm limit; non-positive disables clipping.
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    pub early_stop: bool,
    pub early_stop_tol: f64,
    /// Rollouts per batched forward pass. Fixed so results do not depend on
    /// the number of threads.
    pub chunk: usize,
    /// Write every k-th MINE epoch to the MINE log; 0 disables the log.
    pub mine_log_every: usize,
}

impl TrainConfig {
    pub fn lava() -> Self {
        TrainConfig {
            algorithm: Algorithm::Pg,
            beta: 1.0 / 25.0,
            betas: vec![1.0 / 25.0, 1.0 / 50.0, 1.0 / 75.0, 1.0 / 100.0],
            rollouts: 500,
            mine_minibatch: 50,
            lr_policy: 8e-4,
            lr_mine: 5e-5,
            epochs: 300,
            mine_epochs_first: 2000,
            mine_epochs: 100,
            mine_ema_alpha: 5e-5,
            value_ema_alpha: None,
            mine_hidden: 32,
            mine_parallel: false,
            terminal_mi: false,
            trv_dim: 2,
            cost_cap: 40.0,
            seed: 0,
            baseline: true,
            reward_to_go: false,
            grad_clip: 10.0,
            checkpoint_every: 1,
            early_stop: false,
            early_stop_tol: 1e-3,
            chunk: 50,
            mine_log_every: 1,
        }
    }

    pub fn ballcatch() -> Self {
        TrainConfig {
            beta: 1.0 / 16.0,
            betas: (8..=20).map(|k| 1.0 / (2 * k) as f64).collect(),
            rollouts: 200,
            mine_minibatch: 20,
            lr_policy: 1e-3,
            lr_mine: 5e-5,
            epochs: 100,
            mine_epochs_first: 100_000,
            mine_epochs: 100,
            mine_hidden: 64,
            trv_dim: 8,
            cost_cap: 24.0,
            chunk: 20,
            mine_log_every: 100,
            ..TrainConfig::lava()
        }
    }

    pub fn for_env(env: EnvId) -> Self {
        match env {
            EnvId::Lava => Self::lava(),
            EnvId::BallCatch => Self::ballcatch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if self.rollouts < 2 {
            return bad(format!("rollouts must be at least 2, got {}", self.rollouts));
        }
        if self.chunk == 0 {
            return bad("chunk must be positive".into());
        }
        if self.algorithm == Algorithm::Tdpg {
            if !(self.beta > 0.0) {
                return bad(format!("tdpg needs beta > 0, got {}", self.beta));
            }
            if self.mine_minibatch == 0 || self.mine_minibatch >= self.rollouts {
                return bad(format!(
                    "mine_minibatch {} must satisfy 0 < B < N = {}",
                    self.mine_minibatch, self.rollouts
                ));
            }
        }
        if !(0.0..1.0).contains(&self.mine_ema_alpha) {
            return bad(format!("mine_ema_alpha {} outside [0, 1)", self.mine_ema_alpha));
        }
        Ok(())
    }

    fn critic_count(&self, horizon: usize) -> usize {
        horizon + usize::from(self.terminal_mi)
    }
}

/// Summary of one policy epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub beta: f64,
    pub cost_mean: f64,
    pub cost_std: f64,
    /// Per-timestep MI estimates (empty for plain policy gradient).
    pub mi: Vec<f64>,
    pub j_hat: f64,
    pub checkpoint: Option<String>,
}

impl EpochRecord {
    pub fn new(epoch: usize, beta: f64, costs: &[f64], mi: Vec<f64>, checkpoint: Option<String>) -> Self {
        let cost_mean = mean(costs);
        let j_hat = objective(beta, cost_mean, &mi);
        EpochRecord {
            epoch,
            beta,
            cost_mean,
            cost_std: std_dev(costs),
            mi,
            j_hat,
            checkpoint,
        }
    }

    pub fn mi_sum(&self) -> f64 {
        self.mi.iter().sum()
    }

    pub fn csv_header(mi_columns: usize) -> String {
        let mut h = String::from("epoch,beta,cost_mean,cost_std");
        for t in 0..mi_columns {
            h.push_str(&format!(",mi_t{t}"));
        }
        h.push_str(",j_hat,checkpoint_file");
        h
    }

    pub fn csv(&self) -> String {
        let mut s = format!("{},{},{},{}", self.epoch, self.beta, self.cost_mean, self.cost_std);
        for m in &self.mi {
            s.push_str(&format!(",{m}"));
        }
        s.push_str(&format!(",{},{}", self.j_hat, self.checkpoint.as_deref().unwrap_or("")));
        s
    }

    /// Parses a row written by [`csv`](Self::csv).
    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() < 6 {
            return Err(Error::Contract(format!("malformed record `{line}`")));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Contract(format!("bad number `{s}` in record `{line}`")))
        };
        let mi = f[4..f.len() - 2].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        let ck = f[f.len() - 1];
        Ok(EpochRecord {
            epoch: f[0]
                .parse()
                .map_err(|_| Error::Contract(format!("bad epoch in `{line}`")))?,
            beta: num(f[1])?,
            cost_mean: num(f[2])?,
            cost_std: num(f[3])?,
            mi,
            j_hat: num(f[f.len() - 2])?,
            checkpoint: (!ck.is_empty()).then(|| ck.to_string()),
        })
    }
}

/// `Ĵ = β·cost + Σₜ Îₜ`, summed in timestep order.
pub fn objective(beta: f64, cost_mean: f64, mi: &[f64]) -> f64 {
    mi.iter().fold(beta * cost_mean, |acc, m| acc + m)
}

/// Which rollouts to draw and how.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutSpec {
    pub n: usize,
    pub seed: u64,
    /// Distinguishes batches drawn from the same seed (policy epoch, eval run).
    pub stream: u64,
    pub chunk: usize,
    /// Replace every Gaussian draw by its mean.
    pub deterministic: bool,
}

struct Rollout<S> {
    states: Vec<S>,
    state_vecs: Vec<Vec<f64>>,
    obs: Vec<Vec<f64>>,
    trvs: Vec<Vec<f64>>,
    trv_noise: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    action_noise: Vec<Vec<f64>>,
    costs: Vec<f64>,
}

fn stack(rows: &[&Vec<f64>], row_shape: &[usize]) -> Result<Tensor> {
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(row_shape);
    let mut data = Vec::with_capacity(rows.len() * row_shape.iter().product::<usize>());
    for r in rows {
        data.extend_from_slice(r);
    }
    Tensor::new(shape, data)
}

fn rollout_chunk<E: Environment>(
    env: &E,
    params: &PolicyParams,
    rows: std::ops::Range<usize>,
    spec: &RolloutSpec,
) -> Result<Vec<Rollout<E::State>>> {
    let m = rows.len();
    let horizon = env.horizon();
    let obs_shape = env.obs_shape();
    let trv_dim = params.trv_dim;
    let adim = env.action_dim();
    let mut rngs: Vec<Rng> = rows
        .clone()
        .map(|n| Rng::stream(spec.seed, &[tags::ROLLOUT, spec.stream, n as u64]))
        .collect();
    let mut out: Vec<Rollout<E::State>> = rngs
        .iter_mut()
        .map(|rng| {
            let s = env.sample_initial(rng);
            Rollout {
                state_vecs: vec![env.state_vector(&s)],
                states: vec![s],
                obs: Vec::with_capacity(horizon),
                trvs: Vec::with_capacity(horizon),
                trv_noise: Vec::with_capacity(horizon),
                actions: Vec::with_capacity(horizon),
                action_noise: Vec::with_capacity(horizon),
                costs: Vec::with_capacity(horizon + 1),
            }
        })
        .collect();

    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let mut prev = g.constant(Tensor::zeros(&[m, trv_dim]));
    for t in 0..horizon {
        for (r, rng) in out.iter_mut().zip(rngs.iter_mut()) {
            let y = env.observe(r.states.last().unwrap(), rng);
            r.obs.push(y);
        }
        let obs_rows: Vec<&Vec<f64>> = out.iter().map(|r| r.obs.last().unwrap()).collect();
        let obs = g.constant(stack(&obs_rows, &obs_shape)?);
        let head = params.q_forward(&mut g, &bound, t, obs, prev)?;
        let eps: Vec<Vec<f64>> = rngs
            .iter_mut()
            .map(|rng| draw(rng, trv_dim, spec.deterministic))
            .collect();
        let eps_var = g.constant(stack(&eps.iter().collect::<Vec<_>>(), &[trv_dim])?);
        let trv = reparameterize(&mut g, head, eps_var)?;
        let pi_head = params.pi_forward(&mut g, &bound, t, trv)?;
        let eu: Vec<Vec<f64>> = rngs
            .iter_mut()
            .map(|rng| draw(rng, adim, spec.deterministic))
            .collect();
        let eu_var = g.constant(stack(&eu.iter().collect::<Vec<_>>(), &[adim])?);
        let action = reparameterize(&mut g, pi_head, eu_var)?;

        let trv_vals = g.value(trv).clone();
        let act_vals = g.value(action).clone();
        for (i, (r, (e, ea))) in out.iter_mut().zip(eps.into_iter().zip(eu)).enumerate() {
            let u = act_vals.row(i).to_vec();
            let s = r.states.last().unwrap();
            let next = env.step(s, &u);
            let sv = env.state_vector(&next);
            if !u.iter().chain(&sv).all(|v| v.is_finite()) || !trv_vals.row(i).iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteRollout {
                    rollout: rows.start + i,
                    timestep: t,
                });
            }
            r.costs.push(env.stage_cost(s, &u, t));
            r.trvs.push(trv_vals.row(i).to_vec());
            r.trv_noise.push(e);
            r.actions.push(u);
            r.action_noise.push(ea);
            r.state_vecs.push(sv);
            r.states.push(next);
        }
        prev = g.constant(trv_vals);
    }
    for r in out.iter_mut() {
        let c = env.terminal_cost(r.states.last().unwrap());
        r.costs.push(c);
    }
    Ok(out)
}

fn draw(rng: &mut Rng, n: usize, deterministic: bool) -> Vec<f64> {
    let v = rng.normals(n);
    if deterministic {
        vec![0.0; n]
    } else {
        v
    }
}

/// Rolls out `spec.n` trajectories of the stochastic policy. Rollout `n`
/// always draws from its own stream, so the batch does not depend on how
/// many rollouts are drawn, the chunk size or the thread count.
pub fn rollout_batch<E: Environment>(
    env: &E,
    params: &PolicyParams,
    spec: &RolloutSpec,
) -> Result<TrajectoryBatch<E::State>> {
    if params.action_dim != env.action_dim() {
        return Err(Error::Contract(format!(
            "policy action dim {} vs env {}",
            params.action_dim,
            env.action_dim()
        )));
    }
    if params.time_varying && params.copies() != env.horizon() {
        return Err(Error::Contract(format!(
            "policy has {} time-varying copies, env horizon is {}",
            params.copies(),
            env.horizon()
        )));
    }
    let chunk = spec.chunk.max(1);
    let ranges: Vec<_> = (0..spec.n)
        .step_by(chunk)
        .map(|s| s..(s + chunk).min(spec.n))
        .collect();
    let parts = ranges
        .into_par_iter()
        .map(|r| rollout_chunk(env, params, r, spec))
        .collect::<Result<Vec<_>>>()?;

    let mut b = TrajectoryBatch {
        horizon: env.horizon(),
        states: Vec::with_capacity(spec.n),
        state_vecs: Vec::with_capacity(spec.n),
        observations: Vec::with_capacity(spec.n),
        trvs: Vec::with_capacity(spec.n),
        trv_noise: Vec::with_capacity(spec.n),
        actions: Vec::with_capacity(spec.n),
        action_noise: Vec::with_capacity(spec.n),
        costs: Vec::with_capacity(spec.n),
        total_costs: Vec::with_capacity(spec.n),
        final_distances: Vec::with_capacity(spec.n),
    };
    for r in parts.into_iter().flatten() {
        b.total_costs.push(r.costs.iter().sum());
        b.final_distances.push(env.final_distance(r.states.last().unwrap()));
        b.states.push(r.states);
        b.state_vecs.push(r.state_vecs);
        b.observations.push(r.obs);
        b.trvs.push(r.trvs);
        b.trv_noise.push(r.trv_noise);
        b.actions.push(r.actions);
        b.action_noise.push(r.action_noise);
        b.costs.push(r.costs);
    }
    Ok(b)
}

/// Named gradient blocks in [`PolicyParams::blocks`] order.
pub type BlockGrads = Vec<(String, Tensor)>;

/// Options of the score-function estimator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PgOptions {
    pub baseline: bool,
    pub reward_to_go: bool,
    pub chunk: usize,
}

impl Default for PgOptions {
    fn default() -> Self {
        PgOptions {
            baseline: true,
            reward_to_go: false,
            chunk: 50,
        }
    }
}

/// Per-rollout, per-step weights of the log-probabilities.
fn score_weights<S>(batch: &TrajectoryBatch<S>, opts: &PgOptions) -> Vec<Vec<f64>> {
    let n = batch.len();
    let horizon = batch.horizon;
    if !opts.reward_to_go {
        let b = if opts.baseline { batch.cost_mean() } else { 0.0 };
        return batch
            .total_costs
            .iter()
            .map(|c| vec![c - b; horizon])
            .collect();
    }
    let mut togo: Vec<Vec<f64>> = batch
        .costs
        .iter()
        .map(|cs| {
            let mut acc = vec![0.0; horizon];
            let mut s = cs[horizon];
            for t in (0..horizon).rev() {
                s += cs[t];
                acc[t] = s;
            }
            acc
        })
        .collect();
    if opts.baseline {
        for t in 0..horizon {
            let b = togo.iter().map(|r| r[t]).sum::<f64>() / n as f64;
            for r in togo.iter_mut() {
                r[t] -= b;
            }
        }
    }
    togo
}

/// Score-function estimate of `∇ Ê[c(τ)]` for both networks:
/// `Ê[(Σₜ ∇log q(x̃ₜ|x̃ₜ₋₁,yₜ) + ∇log π(uₜ|x̃ₜ))·(c(τ) − b)]`.
pub fn pg_gradient<S: Sync>(
    params: &PolicyParams,
    batch: &TrajectoryBatch<S>,
    opts: &PgOptions,
) -> Result<BlockGrads> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Contract("empty trajectory batch".into()));
    }
    if batch.trvs.iter().any(|r| r.len() != batch.horizon) {
        return Err(Error::Contract("trajectory batch lacks stored TRVs".into()));
    }
    let weights = score_weights(batch, opts);
    let chunk = opts.chunk.max(1);
    let ranges: Vec<_> = (0..n).step_by(chunk).map(|s| s..(s + chunk).min(n)).collect();
    let parts = ranges
        .into_par_iter()
        .map(|r| score_chunk(params, batch, &weights, r, n))
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_grads(parts))
}

fn score_chunk<S>(
    params: &PolicyParams,
    batch: &TrajectoryBatch<S>,
    weights: &[Vec<f64>],
    rows: std::ops::Range<usize>,
    n: usize,
) -> Result<BlockGrads> {
    let trv_dim = params.trv_dim;
    let obs_shape = obs_row_shape(params, batch)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let mut total = None;
    let zeros = vec![0.0; trv_dim];
    for t in 0..batch.horizon {
        let obs_rows: Vec<&Vec<f64>> = rows.clone().map(|i| &batch.observations[i][t]).collect();
        let obs = g.constant(stack(&obs_rows, &obs_shape)?);
        let prev_rows: Vec<&Vec<f64>> = rows
            .clone()
            .map(|i| if t == 0 { &zeros } else { &batch.trvs[i][t - 1] })
            .collect();
        let prev = g.constant(stack(&prev_rows, &[trv_dim])?);
        let trv_rows: Vec<&Vec<f64>> = rows.clone().map(|i| &batch.trvs[i][t]).collect();
        let trv = g.constant(stack(&trv_rows, &[trv_dim])?);
        let act_rows: Vec<&Vec<f64>> = rows.clone().map(|i| &batch.actions[i][t]).collect();
        let act = g.constant(stack(&act_rows, &[params.action_dim])?);

        let qh = params.q_forward(&mut g, &bound, t, obs, prev)?;
        let lq = g.gaussian_logprob(trv, qh.mean, qh.log_std)?;
        let ph = params.pi_forward(&mut g, &bound, t, trv)?;
        let lp = g.gaussian_logprob(act, ph.mean, ph.log_std)?;
        let l = g.add(lq, lp)?;
        let w = g.constant(Tensor::vector(rows.clone().map(|i| weights[i][t]).collect()));
        let wl = g.mul(l, w)?;
        let s = g.sum(wl)?;
        total = Some(match total {
            None => s,
            Some(acc) => g.add(acc, s)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("zero horizon".into()))?;
    let loss = g.scale(total, 1.0 / n as f64);
    let grads = g.backward(loss)?;
    Ok(params.collect_grads(&bound, &grads))
}

pub(crate) fn obs_row_shape<S>(params: &PolicyParams, batch: &TrajectoryBatch<S>) -> Result<Vec<usize>> {
    let len = batch
        .observations
        .first()
        .and_then(|r| r.first())
        .map(Vec::len)
        .ok_or_else(|| Error::Contract("trajectory batch has no observations".into()))?;
    let q = &params.q[0];
    if let Some(c) = q.encoder.first() {
        let ch = c.kernel.shape()[1];
        let side = ((len / ch) as f64).sqrt().round() as usize;
        if ch * side * side != len {
            return Err(Error::shape("observations", format!("{len} values are not {ch}×S×S")));
        }
        Ok(vec![ch, side, side])
    } else {
        Ok(vec![len])
    }
}

pub(crate) fn stack_rows(rows: &[&Vec<f64>], row_shape: &[usize]) -> Result<Tensor> {
    stack(rows, row_shape)
}

fn sum_grads(parts: Vec<BlockGrads>) -> BlockGrads {
    let mut it = parts.into_iter();
    let mut acc = it.next().unwrap_or_default();
    for part in it {
        for ((_, a), (_, b)) in acc.iter_mut().zip(part) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }
    acc
}

/// Marginal pairing used for the policy-side MI term at each critic index.
pub fn marginal_permutations(n: usize, critics: usize, seed: u64, stream: u64) -> Vec<Vec<usize>> {
    (0..critics)
        .map(|t| Rng::stream(seed, &[tags::MARGINAL, stream, t as u64]).derangement(n))
        .collect()
}

/// Gradient of `β·Ê[c(τ)] + Σₜ Îₜ`: the cost term by the score function,
/// the MI terms pathwise through the reparameterized TRVs with critics
/// frozen. `pi` receives only the cost term.
pub fn tdpg_gradient<S: Sync>(
    params: &PolicyParams,
    batch: &TrajectoryBatch<S>,
    estimators: &[MineEstimator],
    beta: f64,
    perms: &[Vec<usize>],
    opts: &PgOptions,
) -> Result<BlockGrads> {
    let expected = [batch.horizon, batch.horizon + 1];
    if !expected.contains(&estimators.len()) {
        return Err(Error::Contract(format!(
            "{} estimators for horizon {}",
            estimators.len(),
            batch.horizon
        )));
    }
    let cost = pg_gradient(params, batch, opts)?;
    let mi = mine_grad_wrt_policy(estimators, params, batch, perms)?;
    Ok(combine(beta, cost, &mi))
}

/// `β·cost + mi`, block by block.
pub fn combine(beta: f64, mut cost: BlockGrads, mi: &BlockGrads) -> BlockGrads {
    for ((_, c), (_, m)) in cost.iter_mut().zip(mi) {
        for (x, y) in c.data_mut().iter_mut().zip(m.data()) {
            *x = beta * *x + y;
        }
    }
    cost
}

/// Rescales each block whose norm exceeds `limit`.
pub fn clip_blocks(grads: &mut BlockGrads, limit: f64) {
    if limit <= 0.0 {
        return;
    }
    for (_, g) in grads.iter_mut() {
        let n = g.norm();
        if n > limit {
            let s = limit / n;
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Applies one Adam step to the policy.
pub fn apply_update(params: &mut PolicyParams, opt: &mut Adam, grads: &BlockGrads) -> Result<()> {
    let blocks = params.blocks_mut();
    opt.update(
        blocks
            .into_iter()
            .zip(grads)
            .map(|((name, p), (_, g))| (name, p, g)),
    )
}

/// Everything a finished (or aborted) run produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub params: PolicyParams,
    pub estimators: Vec<MineEstimator>,
    pub stopped_early: bool,
}

fn checkpoint_with_critics(params: &PolicyParams, estimators: &[MineEstimator]) -> Checkpoint {
    let mut ck = params.to_checkpoint();
    for e in estimators {
        for (n, t) in e.critic.blocks(&format!("mine/t{}", e.timestep)) {
            ck.blocks.push((n, t.clone()));
        }
    }
    ck
}

struct RunFiles {
    dir: PathBuf,
    records: BufWriter<File>,
    mine_log: Option<BufWriter<File>>,
}

impl RunFiles {
    fn create(dir: &Path, mi_columns: usize, with_mine: bool) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut records = BufWriter::new(File::create(dir.join("records.csv"))?);
        writeln!(records, "{}", EpochRecord::csv_header(mi_columns))?;
        let mine_log = if with_mine {
            let mut f = BufWriter::new(File::create(dir.join("mine_log.csv"))?);
            writeln!(f, "{MINE_LOG_HEADER}")?;
            Some(f)
        } else {
            None
        };
        Ok(RunFiles {
            dir: dir.to_path_buf(),
            records,
            mine_log,
        })
    }
}

/// Stops when the mean of the last 20 `Ĵ` values is within `tol` (relative)
/// of the mean of the 20 before.
pub fn plateaued(j_hats: &[f64], tol: f64) -> bool {
    const W: usize = 20;
    if j_hats.len() < 2 * W {
        return false;
    }
    let k = j_hats.len();
    let recent = mean(&j_hats[k - W..]);
    let before = mean(&j_hats[k - 2 * W..k - W]);
    (recent - before).abs() <= tol * before.abs().max(1e-12)
}

/// Algorithm 2: per epoch roll out, fit the per-timestep critics (TDPG
/// only, with extra epochs the first time), record, then update the policy.
///
/// The checkpoint of epoch `k` holds the parameters that generated that
/// epoch's rollouts. With `out_dir` set, `records.csv`, `mine_log.csv`,
/// checkpoints `ckpt_eNNNN.bin` and `final.bin` are written there; records
/// are flushed every epoch so an aborted run keeps its history.
pub fn train<E: Environment>(
    env: &E,
    initial: PolicyParams,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let horizon = env.horizon();
    let tdpg = cfg.algorithm == Algorithm::Tdpg;
    let beta = if tdpg { cfg.beta } else { 1.0 };
    let n_critics = if tdpg { cfg.critic_count(horizon) } else { 0 };
    let mut params = initial;
    let mut estimators: Vec<MineEstimator> = if tdpg {
        let mut rng = Rng::stream(cfg.seed, &[tags::INIT, 1]);
        build_mine_critics(env.state_dim(), params.trv_dim, n_critics, cfg.mine_hidden, &mut rng)
            .into_iter()
            .enumerate()
            .map(|(t, c)| {
                let mut e = MineEstimator::new(c, t, cfg.lr_mine, cfg.mine_minibatch, cfg.mine_ema_alpha);
                e.value_ema_alpha = cfg.value_ema_alpha;
                e
            })
            .collect()
    } else {
        Vec::new()
    };
    let mut files = match out_dir {
        Some(d) => Some(RunFiles::create(d, n_critics, tdpg && cfg.mine_log_every > 0)?),
        None => None,
    };
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr_policy));
    let opts = PgOptions {
        baseline: cfg.baseline,
        reward_to_go: cfg.reward_to_go,
        chunk: cfg.chunk,
    };
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        let spec = RolloutSpec {
            n: cfg.rollouts,
            seed: cfg.seed,
            stream: epoch as u64,
            chunk: cfg.chunk,
            deterministic: false,
        };
        let batch = rollout_batch(env, &params, &spec)?;

        let mine_epochs = if epoch == 0 { cfg.mine_epochs_first } else { cfg.mine_epochs };
        let pair_batches = (0..n_critics)
            .map(|t| {
                let (s, _) = batch.pairs_at(t.min(horizon));
                let (_, x) = batch.pairs_at(t.min(horizon - 1));
                SamplePairBatch::from_rows(&s, &x)
            })
            .collect::<Result<Vec<_>>>()?;
        let fit = |t: usize, est: &mut MineEstimator| -> Result<(Vec<MineLogRow>, f64)> {
            let mut rng = Rng::stream(cfg.seed, &[tags::MINE_TRAIN, epoch as u64, t as u64]);
            let log = train_mine(est, &pair_batches[t], mine_epochs, &mut rng)?;
            let mut rng = Rng::stream(cfg.seed, &[tags::MINE_ESTIMATE, epoch as u64, t as u64]);
            let raw = mine_estimate(est, &pair_batches[t], &mut rng)?;
            Ok((log, est.observe_estimate(raw)))
        };
        let fitted: Vec<(Vec<MineLogRow>, f64)> = if cfg.mine_parallel {
            estimators
                .par_iter_mut()
                .enumerate()
                .map(|(t, e)| fit(t, e))
                .collect::<Result<_>>()?
        } else {
            estimators
                .iter_mut()
                .enumerate()
                .map(|(t, e)| fit(t, e))
                .collect::<Result<_>>()?
        };
        let mi: Vec<f64> = fitted.iter().map(|(_, v)| *v).collect();

        let ck_name = (cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0)
            .then(|| format!("ckpt_e{epoch:04}.bin"));
        if let (Some(f), Some(name)) = (files.as_mut(), ck_name.as_ref()) {
            checkpoint_with_critics(&params, &estimators).save(&f.dir.join(name))?;
        }
        let record = EpochRecord::new(epoch, beta, &batch.total_costs, mi, ck_name);
        if let Some(f) = files.as_mut() {
            writeln!(f.records, "{}", record.csv())?;
            f.records.flush()?;
            if let Some(log) = f.mine_log.as_mut() {
                for (rows, _) in &fitted {
                    for row in rows.iter().filter(|r| r.epoch % cfg.mine_log_every == 0) {
                        writeln!(log, "{}", row.csv())?;
                    }
                }
                log.flush()?;
            }
        }
        records.push(record);

        let mut grads = if tdpg {
            let perms = marginal_permutations(batch.len(), n_critics, cfg.seed, epoch as u64);
            tdpg_gradient(&params, &batch, &estimators, beta, &perms, &opts)?
        } else {
            pg_gradient(&params, &batch, &opts)?
        };
        clip_blocks(&mut grads, cfg.grad_clip);
        apply_update(&mut params, &mut opt, &grads)?;

        if cfg.early_stop {
            let j: Vec<f64> = records.iter().map(|r| r.j_hat).collect();
            if plateaued(&j, cfg.early_stop_tol) {
                stopped_early = true;
                break;
            }
        }
    }
    if let Some(f) = files.as_ref() {
        checkpoint_with_critics(&params, &estimators).save(&f.dir.join("final.bin"))?;
    }
    Ok(TrainOutcome {
        records,
        params,
        estimators,
        stopped_early,
    })
}

/// A candidate policy from a sweep: the run it came from and its record.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepEntry {
    pub run: String,
    pub record: EpochRecord,
}

/// Among records with a checkpoint and `cost_mean ≤ cost_cap`, the one with
/// the smallest MI sum; ties go to lower cost, then lower epoch.
pub fn select_policy(entries: &[SweepEntry], cost_cap: f64) -> Result<&SweepEntry> {
    let best = entries
        .iter()
        .filter(|e| e.record.checkpoint.is_some() && e.record.cost_mean <= cost_cap)
        .min_by(|a, b| {
            let ka = (a.record.mi_sum(), a.record.cost_mean, a.record.epoch);
            let kb = (b.record.mi_sum(), b.record.cost_mean, b.record.epoch);
            ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
        });
    best.ok_or_else(|| Error::NoFeasiblePolicy {
        best_cost: entries
            .iter()
            .map(|e| e.record.cost_mean)
            .fold(f64::INFINITY, f64::min),
        cap: cost_cap,
    })
}
