//! Network architectures: Gaussian heads for the TRV encoder and controller,
//! and the per-timestep MINE critics.
//!
//! Parameters live in plain [`Tensor`]s. To differentiate, a network is
//! *bound* into a [`Graph`], which registers every block as a leaf in a fixed
//! order; `forward` then consumes those leaves in the same order.

use crate::autodiff::{Checkpoint, Graph, Rng, Tensor, Var};
use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Starting log-std of every policy head built here.
pub const INITIAL_LOG_STD: f64 = -2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Elu,
    Tanh,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Elu => g.elu(x),
            Activation::Tanh => g.tanh(x),
        }
    }
}

/// `y = x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    /// Weights uniform in `±1/√fan_in`, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        Dense {
            weight: Tensor::new(vec![fan_in, fan_out], w).expect("positive extents"),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv {
    pub fn init(c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = c_in * k * k;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = (0..c_out * fan_in)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        Conv {
            kernel: Tensor::new(vec![c_out, c_in, k, k], w).expect("positive extents"),
            bias: Tensor::zeros(&[c_out]),
            stride,
        }
    }

    fn out_extent(&self, size: usize) -> Option<usize> {
        let k = self.kernel.shape()[2];
        (size >= k).then(|| (size - k) / self.stride + 1)
    }
}

/// Fully connected stack; `hidden` follows every layer except the last.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub hidden: Activation,
}

impl Mlp {
    pub fn init(widths: &[usize], hidden: Activation, rng: &mut Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], rng))
            .collect();
        Mlp { layers, hidden }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::fan_out)
    }

    fn blocks<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}/layer{i}/weight"), &l.weight));
            out.push((format!("{prefix}/layer{i}/bias"), &l.bias));
        }
    }

    fn blocks_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}/layer{i}/weight"), &mut l.weight));
            out.push((format!("{prefix}/layer{i}/bias"), &mut l.bias));
        }
    }

    fn forward(&self, g: &mut Graph, vars: &[Var], mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, pair) in vars.chunks(2).enumerate() {
            let h = g.matmul(x, pair[0])?;
            x = g.bias_add(h, pair[1])?;
            if i < last {
                x = self.hidden.apply(g, x);
            }
        }
        Ok(x)
    }
}

/// Mean and clamped log-std of a diagonal Gaussian.
#[derive(Clone, Copy, Debug)]
pub struct GaussianHead {
    pub mean: Var,
    pub log_std: Var,
}

/// Reparameterized draw `mean + exp(log_std)·noise`.
#[derive(Clone, Debug)]
pub struct GaussianSample {
    pub sample: Var,
    pub log_prob: Var,
    pub noise: Tensor,
}

/// A network emitting a diagonal Gaussian over `out_dim` values.
///
/// The optional convolutional encoder processes the primary (image) input;
/// its flattened features are concatenated with the auxiliary vector input
/// before the fully connected stack, whose last layer emits mean and
/// log-std side by side.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianNet {
    pub label: String,
    pub encoder: Vec<Conv>,
    pub mlp: Mlp,
    pub out_dim: usize,
    pub log_std_min: f64,
    pub log_std_max: f64,
}

impl GaussianNet {
    pub fn new(label: impl Into<String>, encoder: Vec<Conv>, mlp: Mlp) -> Result<Self> {
        let raw = mlp.out_dim();
        if !raw.is_multiple_of(2) || raw == 0 {
            return Err(Error::Contract(format!(
                "Gaussian head needs an even output width, got {raw}"
            )));
        }
        Ok(GaussianNet {
            label: label.into(),
            encoder,
            mlp,
            out_dim: raw / 2,
            log_std_min: LOG_STD_MIN,
            log_std_max: LOG_STD_MAX,
        })
    }

    /// Sets the output bias of every log-std unit, so that the initial
    /// standard deviation is about `exp(log_std)`.
    pub fn with_initial_log_std(mut self, log_std: f64) -> Self {
        let d = self.out_dim;
        let last = self.mlp.layers.last_mut().expect("at least one layer");
        last.bias.data_mut()[d..].iter_mut().for_each(|b| *b = log_std);
        self
    }

    pub fn blocks<'a>(&'a self, prefix: &str) -> Vec<(String, &'a Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.encoder.iter().enumerate() {
            out.push((format!("{prefix}/conv{i}/weight"), &c.kernel));
            out.push((format!("{prefix}/conv{i}/bias"), &c.bias));
        }
        self.mlp.blocks(prefix, &mut out);
        out
    }

    pub fn blocks_mut<'a>(&'a mut self, prefix: &str) -> Vec<(String, &'a mut Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.encoder.iter_mut().enumerate() {
            out.push((format!("{prefix}/conv{i}/weight"), &mut c.kernel));
            out.push((format!("{prefix}/conv{i}/bias"), &mut c.bias));
        }
        self.mlp.blocks_mut(prefix, &mut out);
        out
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        bind_blocks(g, self.blocks(""), trainable)
    }

    pub fn param_count(&self) -> usize {
        self.blocks("").iter().map(|(_, t)| t.numel()).sum()
    }

    /// Mean and log-std for a batch. `primary` is `N×C×H×W` when the net has
    /// an encoder and `N×d` otherwise; `extra` (`N×e`) is appended to the
    /// features.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        primary: Var,
        extra: Option<Var>,
    ) -> Result<GaussianHead> {
        let n_conv = 2 * self.encoder.len();
        let mut x = primary;
        if !self.encoder.is_empty() {
            for (i, (conv, pair)) in self.encoder.iter().zip(vars[..n_conv].chunks(2)).enumerate() {
                if i > 0 {
                    x = g.elu(x);
                }
                x = g.conv2d(x, pair[0], Some(pair[1]), conv.stride)?;
            }
            let s = g.shape(x).to_vec();
            let flat: usize = s[1..].iter().product();
            x = g.reshape(x, vec![s[0], flat])?;
        }
        if let Some(e) = extra {
            x = g.concat(&[x, e])?;
        }
        let raw = self.mlp.forward(g, &vars[n_conv..], x)?;
        if !g.value(raw).is_finite() {
            return Err(Error::NonFiniteOutput {
                layer: format!("{}/layer{}", self.label, self.mlp.layers.len() - 1),
            });
        }
        let mean = g.slice(raw, 0, self.out_dim)?;
        let ls = g.slice(raw, self.out_dim, self.out_dim)?;
        let log_std = g.clamp(ls, self.log_std_min, self.log_std_max);
        Ok(GaussianHead { mean, log_std })
    }

    /// Forward pass followed by a reparameterized draw using `rng`.
    pub fn sample(
        &self,
        g: &mut Graph,
        vars: &[Var],
        primary: Var,
        extra: Option<Var>,
        rng: &mut Rng,
    ) -> Result<GaussianSample> {
        let head = self.forward(g, vars, primary, extra)?;
        let shape = g.shape(head.mean).to_vec();
        let noise = Tensor::new(shape.clone(), rng.normals(shape.iter().product()))?;
        sample_gaussian(g, head, noise)
    }
}

pub(crate) fn bind_blocks(g: &mut Graph, blocks: Vec<(String, &Tensor)>, trainable: bool) -> Vec<Var> {
    blocks
        .into_iter()
        .map(|(_, t)| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect()
}

/// `mean + exp(log_std)∘noise`, with `noise` held constant.
pub fn reparameterize(g: &mut Graph, head: GaussianHead, noise: Var) -> Result<Var> {
    let std = g.exp(head.log_std);
    let scaled = g.mul(std, noise)?;
    g.add(head.mean, scaled)
}

/// Draws through [`reparameterize`] with the given standard-normal `noise`
/// and returns the sample, its log-density and the noise itself.
pub fn sample_gaussian(g: &mut Graph, head: GaussianHead, noise: Tensor) -> Result<GaussianSample> {
    if noise.shape() != g.shape(head.mean) {
        return Err(Error::shape(
            "sample_gaussian",
            format!("noise {:?} vs mean {:?}", noise.shape(), g.shape(head.mean)),
        ));
    }
    let eps = g.constant(noise.clone());
    let sample = reparameterize(g, head, eps)?;
    let log_prob = g.gaussian_logprob(sample, head.mean, head.log_std)?;
    Ok(GaussianSample {
        sample,
        log_prob,
        noise,
    })
}

/// Critic `F(x, x̃)` mapping a concatenated state/TRV pair to a real score.
#[derive(Clone, Debug, PartialEq)]
pub struct MineCritic {
    pub mlp: Mlp,
}

impl MineCritic {
    pub fn init(state_dim: usize, trv_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        MineCritic {
            mlp: Mlp::init(
                &[state_dim + trv_dim, hidden, hidden, 1],
                Activation::Elu,
                rng,
            ),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.in_dim()
    }

    pub fn blocks<'a>(&'a self, prefix: &str) -> Vec<(String, &'a Tensor)> {
        let mut out = Vec::new();
        self.mlp.blocks(prefix, &mut out);
        out
    }

    pub fn blocks_mut<'a>(&'a mut self, prefix: &str) -> Vec<(String, &'a mut Tensor)> {
        let mut out = Vec::new();
        self.mlp.blocks_mut(prefix, &mut out);
        out
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        bind_blocks(g, self.blocks(""), trainable)
    }

    /// Scores for each row pair; returns a length-`N` vector.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], state: Var, trv: Var) -> Result<Var> {
        let x = g.concat(&[state, trv])?;
        let out = self.mlp.forward(g, vars, x)?;
        let n = g.shape(out)[0];
        g.reshape(out, vec![n])
    }

    pub fn param_norm(&self) -> f64 {
        self.blocks("")
            .iter()
            .map(|(_, t)| t.norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Parameters of the TRV encoder `q` and controller `pi`.
///
/// With `time_varying` set there is one copy of each network per timestep;
/// otherwise a single copy is shared across time.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub q: Vec<GaussianNet>,
    pub pi: Vec<GaussianNet>,
    pub time_varying: bool,
    pub trv_dim: usize,
    pub action_dim: usize,
}

/// A [`PolicyParams`] registered into a graph.
#[derive(Clone, Debug)]
pub struct BoundPolicy {
    pub q: Vec<Vec<Var>>,
    pub pi: Vec<Vec<Var>>,
}

impl PolicyParams {
    fn copy_index(&self, t: usize) -> usize {
        if self.time_varying {
            t
        } else {
            0
        }
    }

    pub fn q_at(&self, t: usize) -> &GaussianNet {
        &self.q[self.copy_index(t)]
    }

    pub fn pi_at(&self, t: usize) -> &GaussianNet {
        &self.pi[self.copy_index(t)]
    }

    pub fn copies(&self) -> usize {
        self.q.len()
    }

    /// Named blocks, `q/t{i}/...` then `pi/t{i}/...`.
    pub fn blocks(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, q) in self.q.iter().enumerate() {
            out.extend(q.blocks(&format!("q/t{i}")));
        }
        for (i, p) in self.pi.iter().enumerate() {
            out.extend(p.blocks(&format!("pi/t{i}")));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, q) in self.q.iter_mut().enumerate() {
            out.extend(q.blocks_mut(&format!("q/t{i}")));
        }
        for (i, p) in self.pi.iter_mut().enumerate() {
            out.extend(p.blocks_mut(&format!("pi/t{i}")));
        }
        out
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundPolicy {
        BoundPolicy {
            q: self.q.iter().map(|n| n.bind(g, trainable)).collect(),
            pi: self.pi.iter().map(|n| n.bind(g, trainable)).collect(),
        }
    }

    /// Gradients of every block in [`blocks`](Self::blocks) order.
    pub fn collect_grads(&self, bound: &BoundPolicy, grads: &crate::autodiff::Gradients) -> Vec<(String, Tensor)> {
        let vars = bound.q.iter().chain(&bound.pi).flatten();
        self.blocks()
            .into_iter()
            .zip(vars)
            .map(|((name, t), &v)| (name, grads.get_or_zeros(v, t)))
            .collect()
    }

    pub fn q_forward(
        &self,
        g: &mut Graph,
        bound: &BoundPolicy,
        t: usize,
        obs: Var,
        prev_trv: Var,
    ) -> Result<GaussianHead> {
        let i = self.copy_index(t);
        self.q[i].forward(g, &bound.q[i], obs, Some(prev_trv))
    }

    pub fn pi_forward(&self, g: &mut Graph, bound: &BoundPolicy, t: usize, trv: Var) -> Result<GaussianHead> {
        let i = self.copy_index(t);
        self.pi[i].forward(g, &bound.pi[i], trv, None)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            blocks: self
                .blocks()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
        }
    }

    /// Overwrites every block from `ck`; each block must exist with a
    /// matching shape. Extra blocks in `ck` (e.g. critics) are ignored.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        for (name, t) in self.blocks_mut() {
            let src = ck
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing block `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "block `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }
}

/// Time-varying lava networks: `q` maps `(y, x̃ₜ₋₁)` through two 64-unit ELU
/// layers to a Gaussian over `trv_dim` values, `pi` maps `x̃ₜ` the same way
/// to a 1-D action.
pub fn build_lava_nets(trv_dim: usize, horizon: usize, rng: &mut Rng) -> Result<PolicyParams> {
    build_mlp_policy(2, trv_dim, 1, 64, horizon, rng)
}

/// MLP policy with one copy per timestep.
pub fn build_mlp_policy(
    obs_dim: usize,
    trv_dim: usize,
    action_dim: usize,
    hidden: usize,
    horizon: usize,
    rng: &mut Rng,
) -> Result<PolicyParams> {
    if trv_dim == 0 || horizon == 0 {
        return Err(Error::Contract("trv_dim and horizon must be positive".into()));
    }
    let mut q = Vec::with_capacity(horizon);
    let mut pi = Vec::with_capacity(horizon);
    for t in 0..horizon {
        q.push(GaussianNet::new(
            format!("q/t{t}"),
            Vec::new(),
            Mlp::init(&[obs_dim + trv_dim, hidden, hidden, 2 * trv_dim], Activation::Elu, rng),
        )?
        .with_initial_log_std(INITIAL_LOG_STD));
    }
    for t in 0..horizon {
        pi.push(GaussianNet::new(
            format!("pi/t{t}"),
            Vec::new(),
            Mlp::init(&[trv_dim, hidden, hidden, 2 * action_dim], Activation::Elu, rng),
        )?
        .with_initial_log_std(INITIAL_LOG_STD));
    }
    Ok(PolicyParams {
        q,
        pi,
        time_varying: true,
        trv_dim,
        action_dim,
    })
}

/// Spatial extent after the two stride-2, kernel-4 convolutions, or `None`
/// when the image is too small.
pub fn ballcatch_feature_extent(image_size: usize) -> Option<usize> {
    let probe = Conv {
        kernel: Tensor::zeros(&[1, 1, 4, 4]),
        bias: Tensor::zeros(&[1]),
        stride: 2,
    };
    probe.out_extent(image_size).and_then(|s| probe.out_extent(s))
}

/// Shared-across-time ball-catching networks: a two-layer convolutional
/// encoder (3→6→6 channels, kernel 4, stride 2) feeding two 32-unit tanh
/// layers, and a single linear controller layer.
pub fn build_ballcatch_nets(image_size: usize, trv_dim: usize, rng: &mut Rng) -> Result<PolicyParams> {
    let extent = ballcatch_feature_extent(image_size).ok_or_else(|| {
        Error::Contract(format!("image size {image_size} too small for the encoder"))
    })?;
    if trv_dim == 0 {
        return Err(Error::Contract("trv_dim must be positive".into()));
    }
    let encoder = vec![Conv::init(3, 6, 4, 2, rng), Conv::init(6, 6, 4, 2, rng)];
    let flat = 6 * extent * extent;
    let q = GaussianNet::new(
        "q/t0",
        encoder,
        Mlp::init(&[flat + trv_dim, 32, 32, 2 * trv_dim], Activation::Tanh, rng),
    )?
    .with_initial_log_std(INITIAL_LOG_STD);
    let pi = GaussianNet::new(
        "pi/t0",
        Vec::new(),
        Mlp::init(&[trv_dim, 2], Activation::Identity, rng),
    )?
    .with_initial_log_std(INITIAL_LOG_STD);
    Ok(PolicyParams {
        q: vec![q],
        pi: vec![pi],
        time_varying: false,
        trv_dim,
        action_dim: 1,
    })
}

/// One critic per timestep `0..horizon`, each `[state+trv → hidden → hidden → 1]`.
pub fn build_mine_critics(
    state_dim: usize,
    trv_dim: usize,
    horizon: usize,
    hidden: usize,
    rng: &mut Rng,
) -> Vec<MineCritic> {
    (0..horizon)
        .map(|_| MineCritic::init(state_dim, trv_dim, hidden, rng))
        .collect()
}
