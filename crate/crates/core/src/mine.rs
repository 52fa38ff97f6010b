//! Donsker-Varadhan mutual information estimation with neural critics.

use crate::autodiff::{Adam, AdamConfig, Graph, Rng, Tensor, Var};
use crate::error::{Error, Result};
use crate::envs::TrajectoryBatch;
use crate::nets::{reparameterize, MineCritic, PolicyParams};
use crate::tdpg::{obs_row_shape, stack_rows};

/// Joint samples `(x, x̃)` stored row-wise.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePairBatch {
    pub states: Tensor,
    pub trvs: Tensor,
}

impl SamplePairBatch {
    pub fn new(states: Tensor, trvs: Tensor) -> Result<Self> {
        if states.rank() != 2 || trvs.rank() != 2 || states.rows() != trvs.rows() {
            return Err(Error::shape(
                "SamplePairBatch",
                format!("states {:?} vs trvs {:?}", states.shape(), trvs.shape()),
            ));
        }
        Ok(SamplePairBatch { states, trvs })
    }

    pub fn from_rows(states: &[Vec<f64>], trvs: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(states)?, Tensor::from_rows(trvs)?)
    }

    pub fn len(&self) -> usize {
        self.states.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One row of the MINE training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MineLogRow {
    pub epoch: usize,
    pub timestep: usize,
    pub j_dv: f64,
    pub ema_denominator: f64,
}

pub const MINE_LOG_HEADER: &str = "epoch,timestep,j_dv,ema_denominator";

impl MineLogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{}",
            self.epoch, self.timestep, self.j_dv, self.ema_denominator
        )
    }
}

/// `f̂ₜ = (1 − α)·aₜ + α·f̂ₜ₋₁`.
pub fn ema_update(prev: f64, new: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * new + alpha * prev
}

/// A critic for one timestep together with its optimizer and EMA state.
#[derive(Clone, Debug)]
pub struct MineEstimator {
    pub critic: MineCritic,
    pub optimizer: Adam,
    pub timestep: usize,
    pub minibatch: usize,
    /// Weight on the previous value in the gradient-denominator EMA.
    pub ema_alpha: f64,
    /// EMA of the minibatch marginal mean of `exp F`; `None` until the first
    /// minibatch is seen.
    pub ema_denominator: Option<f64>,
    /// Smoothing weight for reported estimates; `None` disables smoothing.
    pub value_ema_alpha: Option<f64>,
    pub value_ema: Option<f64>,
    /// MINE epochs run so far, used to number log rows.
    pub epochs_run: usize,
}

impl MineEstimator {
    pub fn new(critic: MineCritic, timestep: usize, lr: f64, minibatch: usize, ema_alpha: f64) -> Self {
        MineEstimator {
            critic,
            optimizer: Adam::new(AdamConfig::with_lr(lr)),
            timestep,
            minibatch,
            ema_alpha,
            ema_denominator: None,
            value_ema_alpha: None,
            value_ema: None,
            epochs_run: 0,
        }
    }

    /// Folds a fresh estimate into the value EMA and returns the value to
    /// report (the raw estimate when smoothing is off).
    pub fn observe_estimate(&mut self, value: f64) -> f64 {
        match self.value_ema_alpha {
            None => value,
            Some(a) => {
                let v = match self.value_ema {
                    None => value,
                    Some(prev) => ema_update(prev, value, a),
                };
                self.value_ema = Some(v);
                v
            }
        }
    }
}

/// Critic scores on the given rows, `N` values.
fn scores(g: &mut Graph, critic: &MineCritic, vars: &[Var], states: &Tensor, trvs: &Tensor) -> Result<Var> {
    let s = g.constant(states.clone());
    let t = g.constant(trvs.clone());
    critic.forward(g, vars, s, t)
}

/// `mean(F over joint) − log mean exp(F over marginal)` as a graph node.
pub fn dv_from_scores(g: &mut Graph, joint: Var, marginal: Var) -> Result<Var> {
    let n = g.shape(marginal)[0] as f64;
    let mj = g.mean(joint)?;
    let lse = g.logsumexp(marginal)?;
    let shift = g.constant(Tensor::scalar(n.ln()));
    let lme = g.sub(lse, shift)?;
    g.sub(mj, lme)
}

/// Donsker-Varadhan objective of `critic` on explicit joint and marginal
/// batches.
pub fn dv_objective(
    critic: &MineCritic,
    joint: &SamplePairBatch,
    marginal: &SamplePairBatch,
) -> Result<f64> {
    if joint.is_empty() || marginal.is_empty() {
        return Err(Error::Contract("dv_objective needs non-empty batches".into()));
    }
    let mut g = Graph::new();
    let vars = critic.bind(&mut g, false);
    let fj = scores(&mut g, critic, &vars, &joint.states, &joint.trvs)?;
    let fm = scores(&mut g, critic, &vars, &marginal.states, &marginal.trvs)?;
    let j = dv_from_scores(&mut g, fj, fm)?;
    Ok(g.value(j).item())
}

fn diverged(critic: &MineCritic, joint: &[f64], marginal: &[f64]) -> Error {
    Error::MineDiverged {
        theta_norm: critic.param_norm(),
        joint_mean: crate::envs::mean(joint),
        marginal_mean: crate::envs::mean(marginal),
    }
}

/// Runs `epochs` MINE epochs on `batch`: sample a joint minibatch and an
/// independently indexed marginal minibatch, ascend the DV bound with the
/// marginal denominator replaced by its EMA, and log `Ĵ_dv` per epoch.
pub fn train_mine(
    est: &mut MineEstimator,
    batch: &SamplePairBatch,
    epochs: usize,
    rng: &mut Rng,
) -> Result<Vec<MineLogRow>> {
    let n = batch.len();
    let b = est.minibatch;
    if epochs > 0 && (b == 0 || b >= n) {
        return Err(Error::Contract(format!(
            "minibatch {b} must satisfy 0 < B < N = {n}"
        )));
    }
    let mut log = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let joint: Vec<usize> = (0..b).map(|_| rng.index(n)).collect();
        let marg: Vec<usize> = (0..b).map(|_| rng.index(n)).collect();
        let js = batch.states.select_rows(&joint)?;
        let jt = batch.trvs.select_rows(&joint)?;
        let mt = batch.trvs.select_rows(&marg)?;

        let mut g = Graph::new();
        let vars = est.critic.bind(&mut g, true);
        let fj = scores(&mut g, &est.critic, &vars, &js, &jt)?;
        let fm = scores(&mut g, &est.critic, &vars, &js, &mt)?;
        let fj_vals = g.value(fj).data().to_vec();
        let fm_vals = g.value(fm).data().to_vec();

        let a = fm_vals.iter().map(|f| f.exp()).sum::<f64>() / b as f64;
        let denom = match est.ema_denominator {
            None => a,
            Some(prev) => ema_update(prev, a, est.ema_alpha),
        };
        let j_dv = crate::envs::mean(&fj_vals) - a.ln();
        if !j_dv.is_finite() || !denom.is_finite() || denom <= 0.0 {
            return Err(diverged(&est.critic, &fj_vals, &fm_vals));
        }
        est.ema_denominator = Some(denom);

        // −(mean F_joint − mean(exp F_marg)/f̂) has gradient −(∇Ê F − Ê⊥[∇e^F]/f̂)
        let mj = g.mean(fj)?;
        let ln_denom = g.constant(Tensor::scalar(denom.ln()));
        let shifted = g.sub(fm, ln_denom)?;
        let ratio = g.exp(shifted);
        let mr = g.mean(ratio)?;
        let obj = g.sub(mj, mr)?;
        let loss = g.neg(obj);
        let grads = g.backward(loss)?;

        let grad_list: Vec<Tensor> = est
            .critic
            .blocks("")
            .iter()
            .zip(&vars)
            .map(|((_, t), &v)| grads.get_or_zeros(v, t))
            .collect();
        let prefix = format!("mine/t{}", est.timestep);
        let blocks = est.critic.blocks_mut(&prefix);
        est.optimizer.update(
            blocks
                .into_iter()
                .zip(&grad_list)
                .map(|((name, p), gr)| (name, p, gr)),
        )?;
        log.push(MineLogRow {
            epoch: est.epochs_run,
            timestep: est.timestep,
            j_dv,
            ema_denominator: denom,
        });
        est.epochs_run += 1;
    }
    Ok(log)
}

/// Full-batch DV estimate; the marginal pairs each `x` with the `x̃` of a
/// derangement of the batch.
pub fn mine_estimate(est: &MineEstimator, batch: &SamplePairBatch, rng: &mut Rng) -> Result<f64> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::Contract(format!("mine_estimate needs at least 2 samples, got {n}")));
    }
    let perm = rng.derangement(n);
    let marginal = SamplePairBatch {
        states: batch.states.clone(),
        trvs: batch.trvs.select_rows(&perm)?,
    };
    let v = dv_objective(&est.critic, batch, &marginal)?;
    if !v.is_finite() {
        return Err(diverged(&est.critic, &[], &[]));
    }
    Ok(v)
}

/// Fixed-critic DV estimate as a function of graph-valued TRVs, so that
/// gradients flow into whatever produced `trvs`. `states` are constants and
/// `perm` chooses the marginal partner of each row.
pub fn dv_term(
    g: &mut Graph,
    critic: &MineCritic,
    critic_vars: &[Var],
    states: Var,
    trvs: Var,
    perm: &[usize],
) -> Result<Var> {
    let fj = critic.forward(g, critic_vars, states, trvs)?;
    let shuffled = g.gather_rows(trvs, perm)?;
    let fm = critic.forward(g, critic_vars, states, shuffled)?;
    dv_from_scores(g, fj, fm)
}


/// Pathwise gradient of `Σₜ Îₜ` with respect to the encoder parameters.
///
/// Each TRV is re-expressed as `x̃ₜ = μ(x̃ₜ₋₁, yₜ) + exp(log σ(x̃ₜ₋₁, yₜ))·εₜ`
/// from the stored noises, unrolled from `x̃₋₁ = 0`; states, observations
/// and critics are held fixed. Critic `k` scores `(x_k, x̃_k)`, and a critic
/// at index `T` pairs the terminal state with `x̃_{T−1}`. `perms[k]` picks the
/// marginal partners for critic `k`. Controller blocks get zero gradient.
pub fn mine_grad_wrt_policy<S>(
    estimators: &[MineEstimator],
    params: &PolicyParams,
    batch: &TrajectoryBatch<S>,
    perms: &[Vec<usize>],
) -> Result<Vec<(String, Tensor)>> {
    let horizon = batch.horizon;
    let n = batch.len();
    if estimators.len() > horizon + 1 || perms.len() < estimators.len() {
        return Err(Error::Contract(format!(
            "{} estimators and {} permutations for horizon {horizon}",
            estimators.len(),
            perms.len()
        )));
    }
    if batch.trv_noise.len() != n || batch.trv_noise.iter().any(|r| r.len() != horizon) {
        return Err(Error::Contract("trajectory batch lacks stored TRV noise".into()));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    if estimators.is_empty() {
        let grads = zero_grads(params);
        return Ok(grads);
    }
    let trv_dim = params.trv_dim;
    let obs_shape = obs_row_shape(params, batch)?;
    let state_at = |g: &mut Graph, t: usize| -> Result<Var> {
        let rows: Vec<&Vec<f64>> = batch.state_vecs.iter().map(|r| &r[t]).collect();
        Ok(g.constant(stack_rows(&rows, &[rows[0].len()])?))
    };
    let mut prev = g.constant(Tensor::zeros(&[n, trv_dim]));
    let mut total: Option<Var> = None;
    let mut add = |g: &mut Graph, v: Var| -> Result<()> {
        total = Some(match total {
            None => v,
            Some(acc) => g.add(acc, v)?,
        });
        Ok(())
    };
    for t in 0..horizon.min(estimators.len()) {
        let obs_rows: Vec<&Vec<f64>> = batch.observations.iter().map(|r| &r[t]).collect();
        let obs = g.constant(stack_rows(&obs_rows, &obs_shape)?);
        let head = params.q_forward(&mut g, &bound, t, obs, prev)?;
        let eps_rows: Vec<&Vec<f64>> = batch.trv_noise.iter().map(|r| &r[t]).collect();
        let eps = g.constant(stack_rows(&eps_rows, &[trv_dim])?);
        let trv = reparameterize(&mut g, head, eps)?;
        let est = &estimators[t];
        let cv = est.critic.bind(&mut g, false);
        let states = state_at(&mut g, t)?;
        let dv = dv_term(&mut g, &est.critic, &cv, states, trv, &perms[t])?;
        add(&mut g, dv)?;
        prev = trv;
    }
    if estimators.len() == horizon + 1 {
        let est = &estimators[horizon];
        let cv = est.critic.bind(&mut g, false);
        let states = state_at(&mut g, horizon)?;
        let dv = dv_term(&mut g, &est.critic, &cv, states, prev, &perms[horizon])?;
        add(&mut g, dv)?;
    }
    let total = total.expect("at least one critic");
    let grads = g.backward(total)?;
    Ok(params.collect_grads(&bound, &grads))
}

fn zero_grads(params: &PolicyParams) -> Vec<(String, Tensor)> {
    params
        .blocks()
        .into_iter()
        .map(|(n, t)| (n, Tensor::zeros(t.shape())))
        .collect()
}

/// Settings for the bivariate Gaussian self-test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelftestConfig {
    pub samples: usize,
    pub hidden: usize,
    pub lr: f64,
    pub minibatch: usize,
    pub epochs: usize,
    pub ema_alpha: f64,
}

impl Default for SelftestConfig {
    fn default() -> Self {
        SelftestConfig {
            samples: 10_000,
            hidden: 64,
            lr: 1e-3,
            minibatch: 500,
            epochs: 3000,
            ema_alpha: 0.99,
        }
    }
}

/// Draws `n` pairs `(x, ρx + √(1−ρ²)·z)` of standard normals.
pub fn gaussian_pairs(n: usize, rho: f64, rng: &mut Rng) -> Result<SamplePairBatch> {
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let x = rng.normal();
        xs.push(vec![x]);
        ys.push(vec![rho * x + (1.0 - rho * rho).sqrt() * rng.normal()]);
    }
    SamplePairBatch::from_rows(&xs, &ys)
}

/// Trains a fresh critic on correlated Gaussian pairs and returns the
/// full-batch estimate on an independent held-out draw.
pub fn gaussian_selftest(rho: f64, cfg: &SelftestConfig, seed: u64) -> Result<f64> {
    let train = gaussian_pairs(cfg.samples, rho, &mut Rng::stream(seed, &[1]))?;
    let held_out = gaussian_pairs(cfg.samples, rho, &mut Rng::stream(seed, &[2]))?;
    let critic = MineCritic::init(1, 1, cfg.hidden, &mut Rng::stream(seed, &[3]));
    let mut est = MineEstimator::new(critic, 0, cfg.lr, cfg.minibatch, cfg.ema_alpha);
    train_mine(&mut est, &train, cfg.epochs, &mut Rng::stream(seed, &[4]))?;
    mine_estimate(&est, &held_out, &mut Rng::stream(seed, &[5]))
}
