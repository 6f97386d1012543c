use super::mlp::ParamSet;
use crate::error::{Error, Result};

/// Global-norm gradient clipping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradClip {
    Disabled,
    MaxNorm(f64),
}

impl GradClip {
    /// `max_norm <= 0` disables clipping.
    pub fn from_norm(max_norm: f64) -> Self {
        if max_norm > 0.0 {
            GradClip::MaxNorm(max_norm)
        } else {
            GradClip::Disabled
        }
    }
}

/// Rescales `grads` in place so that their L2 norm is at most the limit.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [f64], clip: GradClip) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if let GradClip::MaxNorm(max) = clip {
        if norm > max {
            let scale = max / norm;
            grads.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moment estimates for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimState {
    pub fn new(n_params: usize, config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) || !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::param("invalid Adam configuration"));
        }
        Ok(Self { config, step: 0, m: vec![0.0; n_params], v: vec![0.0; n_params] })
    }
}

/// Clips `grads` then applies one Adam update. Returns the pre-clip norm.
pub fn opt_step(params: &mut ParamSet, grads: &mut [f64], state: &mut OptimState, clip: GradClip) -> Result<f64> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape("gradient, parameter and moment sizes differ".into()));
    }
    let norm = clip_gradients(grads, clip);
    state.step += 1;
    let c = state.config;
    let t = state.step as i32;
    let bias1 = 1.0 - c.beta1.powi(t);
    let bias2 = 1.0 - c.beta2.powi(t);
    for (((p, &g), m), v) in params.values_mut().iter_mut().zip(grads.iter()).zip(&mut state.m).zip(&mut state.v) {
        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
        let m_hat = *m / bias1;
        let v_hat = *v / bias2;
        *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
    }
    Ok(norm)
}

/// `target <- rho * target + (1 - rho) * online`.
pub fn polyak_update(target: &mut ParamSet, online: &ParamSet, rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::param(format!("polyak rate must lie in [0, 1], got {rho}")));
    }
    if target.len() != online.len() {
        return Err(Error::Shape("target and online parameter sizes differ".into()));
    }
    for (t, &o) in target.values_mut().iter_mut().zip(online.values()) {
        *t = rho * *t + (1.0 - rho) * o;
    }
    Ok(())
}
