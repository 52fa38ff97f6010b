use std::collections::BTreeMap;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update of `params` in place. `step` is the
/// 1-based update count used for bias correction.
pub fn adam_step(
    block: &str,
    params: &mut Tensor,
    grads: &Tensor,
    state: &mut Moments,
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.shape() != grads.shape() || state.m.len() != params.numel() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "block `{block}`: params {:?}, grads {:?}, moments {}",
                params.shape(),
                grads.shape(),
                state.m.len()
            ),
        ));
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient {
            block: block.to_string(),
        });
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (((p, &g), m), v) in params
        .data_mut()
        .iter_mut()
        .zip(grads.data())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a set of named parameter blocks sharing one step counter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; `blocks` pairs each named parameter with its gradient.
    pub fn update<'a, S: AsRef<str>>(
        &mut self,
        blocks: impl IntoIterator<Item = (S, &'a mut Tensor, &'a Tensor)>,
    ) -> Result<()> {
        self.step += 1;
        for (name, param, grad) in blocks {
            let name = name.as_ref();
            let state = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments::zeros(param.numel()));
            adam_step(name, param, grad, state, self.step, &self.config)?;
        }
        Ok(())
    }
}
