//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First and second moments of one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One update of `param` in place; `step` counts from 1.
///
/// Decay scales the parameter by `1 − lr·wd` before the moment update.
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    step: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grad.len() != param.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::State(format!(
            "adamw: param {} / grad {} / moments {},{} lengths differ",
            param.len(),
            grad.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if step == 0 {
        return Err(Error::State("adamw: step counter starts at 1".into()));
    }
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for i in 0..param.len() {
        param[i] *= decay;
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        param[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// AdamW over a fixed list of parameter tensors.
pub struct AdamW {
    pub config: AdamWConfig,
    params: Vec<Tensor>,
    states: Vec<AdamState>,
    step: u64,
}

impl AdamW {
    pub fn new(params: Vec<Tensor>, config: AdamWConfig) -> Self {
        let states = params.iter().map(|p| AdamState::new(p.numel())).collect();
        AdamW {
            config,
            params,
            states,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Tensor::zero_grad);
    }

    /// Applies the accumulated gradients; parameters without one are only decayed.
    pub fn step(&mut self) -> Result<()> {
        self.step += 1;
        for (p, state) in self.params.iter().zip(&mut self.states) {
            let grad = p.grad().unwrap_or_else(|| vec![0.0; p.numel()]);
            let (step, cfg) = (self.step, &self.config);
            let mut result = Ok(());
            p.update_data(|data| result = adamw_step(data, &grad, state, step, cfg))?;
            result?;
        }
        Ok(())
    }
}
