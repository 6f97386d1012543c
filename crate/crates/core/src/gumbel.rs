//! Gumbel error model for value estimates that pass through a max.
//!
//! A sampled maximum of noisy action values behaves like a Gumbel variable
//! `G(mu, beta)` whose location is the log-sum-exp ("soft-max") of the true
//! values. Least-squares regression recovers the *mean* of that variable,
//! which sits `EULER_MASCHERONI * beta` above the location. Nesting this bias
//! through a finite-horizon chain with scales `beta_t = gamma^(T-t) beta`
//! gives the closed forms in [`theorem1_bound`] and [`theorem2_bound`]; the
//! chain simulator in this module checks them by Monte-Carlo.

use rand::distr::Open01;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

pub const EULER_MASCHERONI: f64 = 0.5772156649015329;

/// Smallest Monte-Carlo sample size accepted by the chain simulator.
pub const MIN_MC_SAMPLES: usize = 10_000;

const WEIGHT_SUM_TOL: f64 = 1e-9;

/// Location/scale pair of a Gumbel (maximum) distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelParams {
    location: f64,
    scale: f64,
}

impl GumbelParams {
    pub fn new(location: f64, scale: f64) -> Result<Self> {
        if !location.is_finite() {
            return Err(Error::param(format!("gumbel location must be finite, got {location}")));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::param(format!("gumbel scale must be > 0, got {scale}")));
        }
        Ok(Self { location, scale })
    }

    pub fn standard() -> Self {
        Self { location: 0.0, scale: 1.0 }
    }

    pub fn location(&self) -> f64 {
        self.location
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn mean(&self) -> f64 {
        self.location + EULER_MASCHERONI * self.scale
    }

    pub fn variance(&self) -> f64 {
        std::f64::consts::PI.powi(2) * self.scale * self.scale / 6.0
    }

    /// Inverse CDF, `u` in (0, 1).
    pub fn quantile(&self, u: f64) -> f64 {
        self.location - self.scale * (-u.ln()).ln()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.sample(Open01);
        self.quantile(u)
    }
}

/// Draws `n` inverse-CDF samples; the same seed always yields the same vector.
pub fn sample_gumbel(params: GumbelParams, n: usize, seed: u64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Empty("gumbel sample count"));
    }
    let mut rng = rng::stream(seed, &[0x6775_6d62]);
    Ok((0..n).map(|_| params.sample(&mut rng)).collect())
}

/// The log-sum-exp operator `beta * log(sum_i w_i exp(q_i / beta))`.
///
/// Entries with zero weight are ignored. The maximum is subtracted before
/// exponentiating, so large values or tiny `beta` do not overflow.
pub fn soft_max_operator(values: &[f64], weights: &[f64], beta: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("soft-max values"));
    }
    if values.len() != weights.len() {
        return Err(Error::Shape(format!("{} values but {} weights", values.len(), weights.len())));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::param(format!("soft-max temperature must be > 0, got {beta}")));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::param(format!("soft-max value {v} is not finite")));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::param("soft-max weights must be non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::param(format!("soft-max weights sum to {total}, expected 1")));
    }
    Ok(log_sum_exp(values, weights, beta))
}

/// [`soft_max_operator`] with uniform weights.
pub fn soft_max_uniform(values: &[f64], beta: f64) -> Result<f64> {
    let w = vec![1.0 / values.len().max(1) as f64; values.len()];
    soft_max_operator(values, &w, beta)
}

// Callers have validated the inputs.
fn log_sum_exp(values: &[f64], weights: &[f64], beta: f64) -> f64 {
    let peak = values.iter().zip(weights).filter(|(_, &w)| w > 0.0).map(|(&q, _)| q).fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 =
        values.iter().zip(weights).filter(|(_, &w)| w > 0.0).map(|(&q, &w)| w * ((q - peak) / beta).exp()).sum();
    peak + beta * sum.ln()
}

fn check_step(horizon: usize, t: usize, gamma: f64, beta: f64) -> Result<()> {
    if horizon == 0 || t == 0 || t > horizon {
        return Err(Error::Domain(format!("time-step t={t} must lie in 1..={horizon}")));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::param(format!("discount must lie in (0, 1], got {gamma}")));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::param(format!("terminal scale must be > 0, got {beta}")));
    }
    Ok(())
}

/// Nested overestimation of the MSE-fitted action value at step `t` of a
/// horizon-`T` chain: `(T - t + 1) * gamma_e * gamma^(T-t) * beta`.
pub fn theorem1_bound(horizon: usize, t: usize, gamma: f64, beta: f64) -> Result<f64> {
    check_step(horizon, t, gamma, beta)?;
    Ok(nested_error(horizon, t, gamma, beta, 1))
}

/// Nested overestimation of the MSE-fitted state value at step `t`:
/// `(T - t + 2) * gamma_e * gamma^(T-t) * beta`.
pub fn theorem2_bound(horizon: usize, t: usize, gamma: f64, beta: f64) -> Result<f64> {
    check_step(horizon, t, gamma, beta)?;
    Ok(nested_error(horizon, t, gamma, beta, 2))
}

// Valid for t up to T + 1 (the terminal state-value level).
fn nested_error(horizon: usize, t: usize, gamma: f64, beta: f64, extra: usize) -> f64 {
    let depth = horizon as f64 - t as f64;
    (depth + extra as f64) * EULER_MASCHERONI * gamma.powf(depth) * beta
}

/// How the simulator realises the per-step MSE optimum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorMode {
    /// Deeper levels use the analytic Gumbel mean; only the queried level is
    /// sampled.
    AnalyticBias,
    /// Every level fits a least-squares constant to sampled targets and the
    /// fitted values (with their sampling error) are propagated upwards.
    FittedMean,
}

/// A deterministic finite-horizon chain whose value estimates carry Gumbel
/// noise with scales `beta_t = gamma^(T-t) * beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedChainSpec {
    pub horizon: usize,
    pub terminal_scale: f64,
    pub discount: f64,
    /// Base reward of each step `1..=horizon`.
    pub rewards: Vec<f64>,
    pub actions_per_state: usize,
    /// Action `j` at step `t` earns `rewards[t-1] + spread * j / (A - 1)`, so
    /// the log-sum-exp sees distinct values.
    pub action_reward_spread: f64,
    pub mc_samples: usize,
    pub seed: u64,
    pub mode: EstimatorMode,
}

impl NestedChainSpec {
    pub fn new(horizon: usize, terminal_scale: f64, discount: f64) -> Self {
        Self {
            horizon,
            terminal_scale,
            discount,
            rewards: vec![1.0; horizon],
            actions_per_state: 3,
            action_reward_spread: 0.5,
            mc_samples: 1_000_000,
            seed: 0,
            mode: EstimatorMode::AnalyticBias,
        }
    }

    pub fn with_samples(mut self, n: usize) -> Self {
        self.mc_samples = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_mode(mut self, mode: EstimatorMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_rewards(mut self, rewards: Vec<f64>) -> Self {
        self.rewards = rewards;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::param("chain horizon must be >= 1"));
        }
        if !(self.terminal_scale > 0.0 && self.terminal_scale.is_finite()) {
            return Err(Error::param(format!("terminal scale must be > 0, got {}", self.terminal_scale)));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::param(format!("discount must lie in (0, 1], got {}", self.discount)));
        }
        if self.rewards.len() != self.horizon {
            return Err(Error::Shape(format!("{} rewards for horizon {}", self.rewards.len(), self.horizon)));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) || !self.action_reward_spread.is_finite() {
            return Err(Error::param("chain rewards must be finite"));
        }
        if self.actions_per_state == 0 {
            return Err(Error::param("actions_per_state must be >= 1"));
        }
        if self.mc_samples < MIN_MC_SAMPLES {
            return Err(Error::InsufficientSamples { got: self.mc_samples, need: MIN_MC_SAMPLES });
        }
        Ok(())
    }

    /// `beta_t` for `t` in `1..=T+1`.
    pub fn scale_at(&self, t: usize) -> f64 {
        self.terminal_scale * self.discount.powf(self.horizon as f64 - t as f64)
    }

    fn reward(&self, t: usize, action: usize) -> f64 {
        let base = self.rewards[t - 1];
        if self.actions_per_state == 1 {
            base
        } else {
            base + self.action_reward_spread * action as f64 / (self.actions_per_state - 1) as f64
        }
    }

    fn lse(&self, values: &[f64], t: usize) -> f64 {
        let w = vec![1.0 / values.len() as f64; values.len()];
        log_sum_exp(values, &w, self.scale_at(t))
    }

    /// Noise-free optimal action values per level, index `t - 1` for
    /// `t = 1..=T+1`; the terminal level is all zeros.
    fn optimal_q(&self) -> Vec<Vec<f64>> {
        let a = self.actions_per_state;
        let mut levels = vec![vec![0.0; a]; self.horizon + 1];
        for t in (1..=self.horizon).rev() {
            let next = self.discount * self.lse(&levels[t], t + 1);
            levels[t - 1] = (0..a).map(|j| self.reward(t, j) + next).collect();
        }
        levels
    }

    /// MSE-optimal (biased) action values with the Gumbel mean injected
    /// analytically at every level.
    fn analytic_mse_q(&self) -> Vec<Vec<f64>> {
        let a = self.actions_per_state;
        let mut levels = vec![vec![0.0; a]; self.horizon + 1];
        for t in (1..=self.horizon).rev() {
            let next = self.discount * self.lse(&levels[t], t + 1);
            let bias = EULER_MASCHERONI * self.scale_at(t);
            levels[t - 1] = (0..a).map(|j| self.reward(t, j) + next + bias).collect();
        }
        levels
    }
}

/// The action whose value is reported by the simulator.
pub const PROBED_ACTION: usize = 0;

/// Monte-Carlo estimate of the nested errors at one level of the chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NestedErrorEstimate {
    pub t: usize,
    /// Closed-form action-value error at this level.
    pub closed_form_q: f64,
    /// Closed-form state-value error at this level.
    pub closed_form_v: f64,
    pub q_bias: f64,
    pub q_se: f64,
    pub v_bias: f64,
    pub v_se: f64,
}

/// Per-level estimates for `t = 1..=T`, plus the state-value estimate of the
/// terminal level `T + 1` needed for the one-step consistency check.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedChainEstimate {
    pub levels: Vec<NestedErrorEstimate>,
    pub terminal_v_bias: f64,
    pub terminal_v_se: f64,
}

#[derive(Debug, Default, Clone, Copy)]
struct MeanVar {
    n: usize,
    mean: f64,
    m2: f64,
}

impl MeanVar {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }
}

const STREAM_Q: u64 = 1;
const STREAM_V: u64 = 2;

/// Sample mean and variance of `n` standard Gumbel draws for one level.
///
/// Streams are keyed by the distance from the terminal level rather than by
/// the horizon, so chains of different length reuse the same noise (common
/// random numbers across a parameter grid).
fn standard_level_stats(spec: &NestedChainSpec, kind: u64, t: usize) -> MeanVar {
    let depth = (spec.horizon + 1 - t) as u64;
    let mut rng = rng::stream(spec.seed, &[kind, depth]);
    let g = GumbelParams::standard();
    let mut acc = MeanVar::default();
    for _ in 0..spec.mc_samples {
        acc.push(g.sample(&mut rng));
    }
    acc
}

/// Fits the MSE-optimal constant to `n` draws of `G(location, scale)`.
fn fit_level(spec: &NestedChainSpec, kind: u64, t: usize, location: f64, scale: f64) -> (f64, f64) {
    let depth = (spec.horizon + 1 - t) as u64;
    let mut rng = rng::stream(spec.seed, &[kind, depth]);
    let g = GumbelParams { location, scale };
    let mut acc = MeanVar::default();
    for _ in 0..spec.mc_samples {
        acc.push(g.sample(&mut rng));
    }
    (acc.mean, (acc.variance() / acc.n as f64).sqrt())
}

/// Runs the MSE recursion over the whole chain and reports the estimated
/// error of every level against the noise-free optimum.
pub fn simulate_nested_chain(spec: &NestedChainSpec) -> Result<NestedChainEstimate> {
    spec.validate()?;
    let horizon = spec.horizon;
    let gamma = spec.discount;
    let beta = spec.terminal_scale;
    let q_opt = spec.optimal_q();
    let v_opt: Vec<f64> = (1..=horizon + 1).map(|t| spec.lse(&q_opt[t - 1], t)).collect();
    let a = PROBED_ACTION;

    let closed = |t: usize| (nested_error(horizon, t, gamma, beta, 1), nested_error(horizon, t, gamma, beta, 2));

    let mut levels = Vec::with_capacity(horizon);
    let mut terminal = (0.0, 0.0);

    match spec.mode {
        EstimatorMode::AnalyticBias => {
            let q_mse = spec.analytic_mse_q();
            for t in 1..=horizon {
                let scale = spec.scale_at(t);
                // Location of Q-hat: reward plus discounted soft-max of the
                // MSE-fitted next level.
                let q_loc = spec.reward(t, a) + gamma * spec.lse(&q_mse[t], t + 1);
                let (q_mean, q_se) = fit_level(spec, STREAM_Q, t, q_loc, scale);
                let v_loc = spec.lse(&q_mse[t - 1], t);
                let (v_mean, v_se) = fit_level(spec, STREAM_V, t, v_loc, scale);
                let (cq, cv) = closed(t);
                levels.push(NestedErrorEstimate {
                    t,
                    closed_form_q: cq,
                    closed_form_v: cv,
                    q_bias: q_mean - q_opt[t - 1][a],
                    q_se,
                    v_bias: v_mean - v_opt[t - 1],
                    v_se,
                });
            }
            let t = horizon + 1;
            let (v_mean, v_se) = fit_level(spec, STREAM_V, t, v_opt[t - 1], spec.scale_at(t));
            terminal = (v_mean - v_opt[t - 1], v_se);
        }
        EstimatorMode::FittedMean => {
            // fitted[t-1][j]: least-squares constant of the Q-hat draws for
            // action j at level t. All actions of a level share one noise
            // stream, so the fit of `loc_j + scale * g_i` is `loc_j + scale * mean(g)`
            // and the propagated error is exactly a discounted sum over levels.
            let acts = spec.actions_per_state;
            let mut fitted = vec![vec![0.0; acts]; horizon + 1];
            // err_var[t-1]: sampling variance of the fitted error at level t.
            let mut err_var = vec![0.0; horizon + 2];
            for t in (1..=horizon).rev() {
                let scale = spec.scale_at(t);
                let stats = standard_level_stats(spec, STREAM_Q, t);
                let next = gamma * spec.lse(&fitted[t], t + 1);
                fitted[t - 1] = (0..acts).map(|j| spec.reward(t, j) + next + scale * stats.mean).collect();
                err_var[t - 1] = gamma * gamma * err_var[t] + scale * scale * stats.variance() / stats.n as f64;
            }
            for t in 1..=horizon + 1 {
                let scale = spec.scale_at(t);
                let stats = standard_level_stats(spec, STREAM_V, t);
                let v_fit = spec.lse(&fitted[t - 1], t) + scale * stats.mean;
                let v_var = err_var[t - 1] + scale * scale * stats.variance() / stats.n as f64;
                if t == horizon + 1 {
                    terminal = (v_fit - v_opt[t - 1], v_var.sqrt());
                } else {
                    let (cq, cv) = closed(t);
                    levels.push(NestedErrorEstimate {
                        t,
                        closed_form_q: cq,
                        closed_form_v: cv,
                        q_bias: fitted[t - 1][a] - q_opt[t - 1][a],
                        q_se: err_var[t - 1].sqrt(),
                        v_bias: v_fit - v_opt[t - 1],
                        v_se: v_var.sqrt(),
                    });
                }
            }
        }
    }
    Ok(NestedChainEstimate { levels, terminal_v_bias: terminal.0, terminal_v_se: terminal.1 })
}

/// Monte-Carlo action-value overestimation at step `t`: `(bias, standard_error)`.
pub fn simulate_nested_error(spec: &NestedChainSpec, t: usize) -> Result<(f64, f64)> {
    spec.validate()?;
    check_step(spec.horizon, t, spec.discount, spec.terminal_scale)?;
    let est = simulate_nested_chain(spec)?;
    let level = est.levels[t - 1];
    Ok((level.q_bias, level.q_se))
}

/// `|Q~(s_t, a_t) - (r_t + gamma * V~(s_{t+1}))|` evaluated from the closed
/// forms of the nested action- and state-value errors.
pub fn theorem3_consistency(spec: &NestedChainSpec, t: usize) -> Result<f64> {
    check_step(spec.horizon, t, spec.discount, spec.terminal_scale)?;
    if spec.rewards.len() != spec.horizon || spec.actions_per_state == 0 {
        return Err(Error::param("malformed chain spec"));
    }
    let (horizon, gamma, beta) = (spec.horizon, spec.discount, spec.terminal_scale);
    let q_opt = spec.optimal_q();
    let a = PROBED_ACTION;
    let q_tilde = q_opt[t - 1][a] + nested_error(horizon, t, gamma, beta, 1);
    let v_next = spec.lse(&q_opt[t], t + 1) + nested_error(horizon, t + 1, gamma, beta, 2);
    Ok((q_tilde - (spec.reward(t, a) + gamma * v_next)).abs())
}

/// Monte-Carlo version of [`theorem3_consistency`]: the residual between the
/// simulated `Q~_t` and `r_t + gamma * V~_{t+1}`, and the combined standard
/// error `sqrt(se_q^2 + gamma^2 se_v^2)`.
pub fn theorem3_mc(spec: &NestedChainSpec, est: &NestedChainEstimate, t: usize) -> Result<(f64, f64)> {
    check_step(spec.horizon, t, spec.discount, spec.terminal_scale)?;
    let q_opt = spec.optimal_q();
    let a = PROBED_ACTION;
    let q = &est.levels[t - 1];
    let (v_bias, v_se) = if t == spec.horizon {
        (est.terminal_v_bias, est.terminal_v_se)
    } else {
        (est.levels[t].v_bias, est.levels[t].v_se)
    };
    let gamma = spec.discount;
    let q_tilde = q_opt[t - 1][a] + q.q_bias;
    let v_tilde = spec.lse(&q_opt[t], t + 1) + v_bias;
    let residual = q_tilde - (spec.reward(t, a) + gamma * v_tilde);
    Ok((residual, (q.q_se.powi(2) + gamma * gamma * v_se * v_se).sqrt()))
}

/// Parameters of the error curve `f(x) = C x gamma^(x - b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorCurveParams {
    pub coefficient: f64,
    pub discount: f64,
    pub offset: u8,
    pub horizon_index: f64,
}

impl ErrorCurveParams {
    pub fn new(coefficient: f64, discount: f64, offset: u8, horizon_index: f64) -> Result<Self> {
        if !(discount > 0.0 && discount <= 1.0) {
            return Err(Error::param(format!("discount must lie in (0, 1], got {discount}")));
        }
        if offset != 1 && offset != 2 {
            return Err(Error::param(format!("offset must be 1 or 2, got {offset}")));
        }
        if !(horizon_index >= 0.0) || !coefficient.is_finite() {
            return Err(Error::param("horizon index must be >= 0 and coefficient finite"));
        }
        Ok(Self { coefficient, discount, offset, horizon_index })
    }

    /// Coefficient `C = gamma_e * beta` used by the nested-error closed forms.
    pub fn for_scale(beta: f64, discount: f64, offset: u8, horizon_index: f64) -> Result<Self> {
        Self::new(EULER_MASCHERONI * beta, discount, offset, horizon_index)
    }

    pub fn at(self, horizon_index: f64) -> Self {
        Self { horizon_index, ..self }
    }
}

pub fn error_curve(params: &ErrorCurveParams) -> f64 {
    let x = params.horizon_index;
    params.coefficient * x * params.discount.powf(x - params.offset as f64)
}

/// Maximiser `-1 / ln(gamma)` of the error curve; undefined at `gamma = 1`.
pub fn error_curve_argmax(discount: f64) -> Result<f64> {
    if !(discount > 0.0 && discount < 1.0) {
        return Err(Error::Domain(format!(
            "error curve has a finite maximiser only for discount in (0, 1), got {discount}"
        )));
    }
    Ok(-1.0 / discount.ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_positive_scale() {
        assert!(GumbelParams::new(5.0, 0.0).is_err());
        assert!(GumbelParams::new(5.0, -1.0).is_err());
        assert!(sample_gumbel(GumbelParams::standard(), 0, 1).is_err());
    }

    #[test]
    fn standard_sample_mean() {
        let xs = sample_gumbel(GumbelParams::standard(), 1_000_000, 11).unwrap();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let tol = 3.0 * (std::f64::consts::PI / 6f64.sqrt()) / 1e3;
        assert!((mean - 0.57722).abs() < tol, "mean {mean}");
    }

    #[test]
    fn sample_variance_matches_formula() {
        let p = GumbelParams::new(2.0, 0.5).unwrap();
        let xs = sample_gumbel(p, 1_000_000, 5).unwrap();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expected = std::f64::consts::PI.powi(2) * 0.25 / 6.0;
        assert!((expected - 0.4112).abs() < 1e-4);
        assert!(((var - expected) / expected).abs() < 0.01, "var {var}");
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let p = GumbelParams::new(1.0, 2.0).unwrap();
        assert_eq!(sample_gumbel(p, 64, 3).unwrap(), sample_gumbel(p, 64, 3).unwrap());
        assert_ne!(sample_gumbel(p, 64, 3).unwrap(), sample_gumbel(p, 64, 4).unwrap());
    }

    #[test]
    fn soft_max_constant_values() {
        for beta in [1e-3, 0.5, 1.0, 50.0] {
            let v = soft_max_uniform(&[2.5, 2.5, 2.5], beta).unwrap();
            assert!((v - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_max_small_temperature_approaches_max() {
        let v = soft_max_uniform(&[0.0, 1.0], 1e-4).unwrap();
        assert!((v - 1.0).abs() < 1e-3);
    }

    #[test]
    fn soft_max_unit_temperature() {
        let v = soft_max_uniform(&[0.0, 1.0], 1.0).unwrap();
        // direct evaluation without max subtraction
        let direct = (0.5 * 0f64.exp() + 0.5 * 1f64.exp()).ln();
        assert!((v - direct).abs() < 1e-14);
        assert!((v - 0.62011).abs() < 1e-5);
    }

    #[test]
    fn soft_max_rejects_bad_input() {
        assert!(soft_max_operator(&[], &[], 1.0).is_err());
        assert!(soft_max_operator(&[1.0, 2.0], &[0.5, 0.6], 1.0).is_err());
        assert!(soft_max_operator(&[1.0], &[1.0], 0.0).is_err());
        assert!(soft_max_operator(&[f64::NAN], &[1.0], 1.0).is_err());
        assert!(soft_max_operator(&[1.0, 2.0], &[1.0], 1.0).is_err());
    }

    #[test]
    fn soft_max_does_not_overflow() {
        let v = soft_max_uniform(&[1e4, 1e4 - 1.0], 1e-2).unwrap();
        assert!(v.is_finite() && (v - 1e4).abs() < 1e-1);
    }

    #[test]
    fn closed_forms() {
        for gamma in [0.3, 0.9, 1.0] {
            let b = theorem1_bound(7, 7, gamma, 1.0).unwrap();
            assert!((b - EULER_MASCHERONI).abs() < 1e-15);
        }
        let b = theorem1_bound(5, 3, 0.9, 1.0).unwrap();
        assert!((b - 3.0 * EULER_MASCHERONI * 0.81).abs() < 1e-12);
        assert!((b - 1.40263).abs() < 1e-5);
        let b = theorem1_bound(10, 1, 1.0, 2.0).unwrap();
        assert!((b - 11.5443).abs() < 1e-4);

        let b2 = theorem2_bound(4, 4, 0.9, 1.0).unwrap();
        assert!((b2 - 1.15443).abs() < 1e-5);
        let b2 = theorem2_bound(5, 3, 0.9, 1.0).unwrap();
        assert!((b2 - 1.87018).abs() < 1e-5);

        assert!(theorem1_bound(3, 4, 0.9, 1.0).is_err());
        assert!(theorem2_bound(3, 0, 0.9, 1.0).is_err());
        assert!(theorem1_bound(3, 1, 1.5, 1.0).is_err());
    }

    #[test]
    fn closed_form_difference_is_one_step_bias() {
        for (horizon, t, gamma, beta) in [(5, 3, 0.9, 1.0), (9, 1, 0.5, 2.0), (4, 4, 0.99, 0.5)] {
            let d = theorem2_bound(horizon, t, gamma, beta).unwrap() - theorem1_bound(horizon, t, gamma, beta).unwrap();
            let expected = EULER_MASCHERONI * f64::powi(gamma, (horizon - t) as i32) * beta;
            assert!((d - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn simulator_requires_enough_samples() {
        let spec = NestedChainSpec::new(3, 1.0, 0.9).with_samples(9_999);
        assert!(matches!(simulate_nested_error(&spec, 1), Err(Error::InsufficientSamples { .. })));
    }

    #[test]
    fn horizon_one_bias_is_euler_gamma() {
        for mode in [EstimatorMode::AnalyticBias, EstimatorMode::FittedMean] {
            let spec = NestedChainSpec::new(1, 1.0, 0.9).with_samples(200_000).with_seed(3).with_mode(mode);
            let (bias, se) = simulate_nested_error(&spec, 1).unwrap();
            assert!((bias - EULER_MASCHERONI).abs() < 3.0 * se, "{bias} +- {se}");
        }
    }

    #[test]
    fn vanishing_noise_gives_no_bias() {
        let spec = NestedChainSpec::new(4, 1e-6, 0.9).with_samples(10_000);
        let (bias, se) = simulate_nested_error(&spec, 2).unwrap();
        // the bias scales with beta, so it is of order 1e-6 and its standard
        // error of order 1e-8; zero is not inside the band, the closed form is
        assert!(bias.abs() < 1e-5, "{bias}");
        assert!((bias - theorem1_bound(4, 2, 0.9, 1e-6).unwrap()).abs() < 3.0 * se, "{bias} +- {se}");
    }

    #[test]
    fn nested_bias_matches_closed_form() {
        for mode in [EstimatorMode::AnalyticBias, EstimatorMode::FittedMean] {
            let spec = NestedChainSpec::new(5, 1.0, 0.9).with_samples(200_000).with_seed(9).with_mode(mode);
            let (bias, se) = simulate_nested_error(&spec, 3).unwrap();
            let closed = theorem1_bound(5, 3, 0.9, 1.0).unwrap();
            assert!((bias - closed).abs() < 3.0 * se, "{mode:?}: {bias} +- {se} vs {closed}");
        }
    }

    #[test]
    fn theorem3_identity() {
        for gamma in [0.5, 0.9, 1.0] {
            let spec = NestedChainSpec::new(6, 1.3, gamma);
            for t in 1..=6 {
                assert!(theorem3_consistency(&spec, t).unwrap() < 1e-9);
            }
        }
    }

    #[test]
    fn error_curve_shape() {
        let p = ErrorCurveParams::for_scale(2.0, 0.9, 1, 0.0).unwrap();
        assert_eq!(error_curve(&p), 0.0);
        assert!(ErrorCurveParams::new(1.0, 0.9, 3, 1.0).is_err());
        assert!(error_curve_argmax(1.0).is_err());
        assert!((error_curve_argmax(0.99).unwrap() - 99.4992).abs() < 1e-4);

        let p = ErrorCurveParams::new(1.0, 0.95, 1, 0.0).unwrap();
        let last = error_curve(&p.at(500.0));
        assert!(last < 1e-6 * p.coefficient);
    }
}
