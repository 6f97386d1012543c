//! Optimal and underestimated Bellman backups on finite MDPs.
//!
//! The underestimated operator applies an `iota`-quantile reduction to the
//! optimal backup. A quantile of a deterministic scalar needs an implicit
//! distribution, so three readings are provided:
//!
//! - [`Interpretation::Scaling`]: `iota * (r + gamma E[max Q])`, an
//!   `iota * gamma` contraction.
//! - [`Interpretation::NoisyQuantile`]: the empirical `iota`-quantile of the
//!   backup target when `Q(s', a')` carries Gumbel(0, beta) noise before the
//!   max.
//! - [`Interpretation::Expectile`]: the `tau`-expectile of that same noisy
//!   target sample.
//!
//! The noisy readings use a fixed table of noise draws (common random numbers)
//! so that a backup is a deterministic function of `Q`.

use crate::error::{Error, Result};
use crate::expectile::solve_expectile;
use crate::finite_mdp::{FiniteMdp, QTable};
use crate::gumbel::GumbelParams;
use crate::rng;

/// Lower bound on the noise sample size of the noisy readings.
pub const MIN_NOISE_SAMPLES: usize = 1_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpretation {
    Scaling,
    NoisyQuantile,
    Expectile,
}

impl std::str::FromStr for Interpretation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scaling" => Ok(Self::Scaling),
            "quantile" | "noisy-quantile" => Ok(Self::NoisyQuantile),
            "expectile" => Ok(Self::Expectile),
            other => Err(Error::param(format!("unknown interpretation `{other}`"))),
        }
    }
}

impl std::fmt::Display for Interpretation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Scaling => "scaling",
            Self::NoisyQuantile => "quantile",
            Self::Expectile => "expectile",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnderestimateConfig {
    pub iota: f64,
    pub interpretation: Interpretation,
    /// Gumbel scale of the noise added to `Q(s', a')` (noisy readings only).
    pub noise_scale: f64,
    /// Expectile level (expectile reading only).
    pub tau: f64,
    pub noise_samples: usize,
    pub noise_seed: u64,
}

impl UnderestimateConfig {
    pub fn scaling(iota: f64) -> Self {
        Self {
            iota,
            interpretation: Interpretation::Scaling,
            noise_scale: 0.0,
            tau: 0.5,
            noise_samples: MIN_NOISE_SAMPLES,
            noise_seed: 0,
        }
    }

    pub fn noisy_quantile(iota: f64, noise_scale: f64) -> Self {
        Self { interpretation: Interpretation::NoisyQuantile, noise_scale, ..Self::scaling(iota) }
    }

    pub fn expectile(tau: f64, noise_scale: f64) -> Self {
        Self { interpretation: Interpretation::Expectile, noise_scale, tau, ..Self::scaling(1.0) }
    }

    pub fn with_noise(mut self, samples: usize, seed: u64) -> Self {
        self.noise_samples = samples;
        self.noise_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.iota > 0.0 && self.iota <= 1.0) {
            return Err(Error::param(format!("iota must lie in (0, 1], got {}", self.iota)));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::param(format!("noise scale must be >= 0, got {}", self.noise_scale)));
        }
        if self.interpretation != Interpretation::Scaling && self.noise_samples < MIN_NOISE_SAMPLES {
            return Err(Error::InsufficientSamples { got: self.noise_samples, need: MIN_NOISE_SAMPLES });
        }
        if self.interpretation == Interpretation::Expectile && !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::param(format!("expectile tau must lie in (0, 1), got {}", self.tau)));
        }
        Ok(())
    }

    /// Contraction modulus guaranteed for this reading.
    pub fn modulus_bound(&self, gamma: f64) -> f64 {
        match self.interpretation {
            Interpretation::Scaling => self.iota * gamma,
            Interpretation::NoisyQuantile | Interpretation::Expectile => gamma,
        }
    }
}

/// Restricts the `max` over next actions, e.g. to the support of a policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionMask {
    n_actions: usize,
    allowed: Vec<bool>,
}

impl ActionMask {
    pub fn new(n_states: usize, n_actions: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != n_states * n_actions {
            return Err(Error::Shape("action mask shape".into()));
        }
        if allowed.chunks(n_actions).any(|row| !row.iter().any(|&x| x)) {
            return Err(Error::param("every state needs at least one allowed action"));
        }
        Ok(Self { n_actions, allowed })
    }

    fn allows(&self, s: usize, a: usize) -> bool {
        self.allowed[s * self.n_actions + a]
    }
}

fn next_state_max(q: &QTable, mask: Option<&ActionMask>, noise: Option<&[f64]>) -> Vec<f64> {
    (0..q.n_states())
        .map(|s| {
            let mut best = f64::NEG_INFINITY;
            for a in 0..q.n_actions() {
                if mask.is_some_and(|m| !m.allows(s, a)) {
                    continue;
                }
                let v = q.get(s, a) + noise.map_or(0.0, |n| n[s * q.n_actions() + a]);
                best = best.max(v);
            }
            best
        })
        .collect()
}

fn check_shape(mdp: &FiniteMdp, q: &QTable) -> Result<()> {
    if q.n_states() != mdp.n_states() || q.n_actions() != mdp.n_actions() {
        return Err(Error::Shape(format!(
            "Q table is {}x{}, MDP is {}x{}",
            q.n_states(),
            q.n_actions(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    Ok(())
}

/// One synchronous sweep `r(s,a) + gamma E_{s'}[max_{a'} Q(s', a')]`.
pub fn optimal_backup(mdp: &FiniteMdp, q: &QTable) -> Result<QTable> {
    optimal_backup_masked(mdp, q, None)
}

pub fn optimal_backup_masked(mdp: &FiniteMdp, q: &QTable, mask: Option<&ActionMask>) -> Result<QTable> {
    check_shape(mdp, q)?;
    let v = next_state_max(q, mask, None);
    Ok(QTable::from_fn(mdp.n_states(), mdp.n_actions(), |s, a| {
        mdp.reward(s, a) + mdp.discount() * mdp.expected_next(s, a, &v)
    }))
}

/// Empirical quantile with linear interpolation between order statistics
/// (position `iota * (m - 1)` in the sorted sample).
pub fn empirical_quantile(samples: &mut [f64], iota: f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let pos = iota * (samples.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        samples[lo]
    } else {
        samples[lo] + frac * (samples[hi] - samples[lo])
    }
}

/// Gumbel noise tables, one `[s'][a']` table per draw.
#[derive(Debug, Clone)]
struct NoiseTables {
    draws: Vec<Vec<f64>>,
}

impl NoiseTables {
    fn new(mdp: &FiniteMdp, cfg: &UnderestimateConfig) -> Result<Self> {
        let cells = mdp.n_states() * mdp.n_actions();
        if cfg.noise_scale == 0.0 {
            return Ok(Self { draws: vec![vec![0.0; cells]; cfg.noise_samples] });
        }
        let g = GumbelParams::new(0.0, cfg.noise_scale)?;
        let mut rng = rng::stream(cfg.noise_seed, &[0x006e_6f69_7365]);
        let draws = (0..cfg.noise_samples).map(|_| (0..cells).map(|_| g.sample(&mut rng)).collect()).collect();
        Ok(Self { draws })
    }
}

/// Underestimated backup operator, reusable across sweeps so that the noisy
/// readings keep the same noise draws.
#[derive(Debug, Clone)]
pub struct UnderestimatedOperator {
    cfg: UnderestimateConfig,
    noise: Option<NoiseTables>,
    mask: Option<ActionMask>,
}

impl UnderestimatedOperator {
    pub fn new(mdp: &FiniteMdp, cfg: &UnderestimateConfig) -> Result<Self> {
        cfg.validate()?;
        let noise = match cfg.interpretation {
            Interpretation::Scaling => None,
            _ => Some(NoiseTables::new(mdp, cfg)?),
        };
        Ok(Self { cfg: cfg.clone(), noise, mask: None })
    }

    pub fn with_mask(mut self, mask: ActionMask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn config(&self) -> &UnderestimateConfig {
        &self.cfg
    }

    pub fn apply(&self, mdp: &FiniteMdp, q: &QTable) -> Result<QTable> {
        check_shape(mdp, q)?;
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let gamma = mdp.discount();
        let mask = self.mask.as_ref();
        match (&self.noise, self.cfg.interpretation) {
            (None, _) => {
                let v = next_state_max(q, mask, None);
                Ok(QTable::from_fn(ns, na, |s, a| {
                    self.cfg.iota * (mdp.reward(s, a) + gamma * mdp.expected_next(s, a, &v))
                }))
            }
            (Some(noise), interp) => {
                // targets[cell][j]: backup target of (s, a) under noise draw j
                let m = noise.draws.len();
                let mut targets = vec![vec![0.0; m]; ns * na];
                for (j, draw) in noise.draws.iter().enumerate() {
                    let v = next_state_max(q, mask, Some(draw));
                    for s in 0..ns {
                        for a in 0..na {
                            targets[s * na + a][j] = mdp.reward(s, a) + gamma * mdp.expected_next(s, a, &v);
                        }
                    }
                }
                let mut out = Vec::with_capacity(ns * na);
                for mut sample in targets {
                    let v = match interp {
                        Interpretation::Expectile => solve_expectile(&sample, None, self.cfg.tau)?,
                        _ => empirical_quantile(&mut sample, self.cfg.iota),
                    };
                    out.push(v);
                }
                QTable::from_vec(ns, na, out)
            }
        }
    }
}

/// One sweep of the underestimated operator. Builds fresh noise tables from
/// `cfg.noise_seed`; use [`UnderestimatedOperator`] to apply it repeatedly.
pub fn underestimated_backup(mdp: &FiniteMdp, q: &QTable, cfg: &UnderestimateConfig) -> Result<QTable> {
    UnderestimatedOperator::new(mdp, cfg)?.apply(mdp, q)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport {
    pub interpretation: Interpretation,
    pub pairs_tested: usize,
    /// Largest `||T Q1 - T Q2|| / ||Q1 - Q2||` over all tested pairs.
    pub max_ratio: f64,
    /// Ratio achieved by the constructed pair `Q2 = Q1 + c`.
    pub shift_pair_ratio: f64,
    pub bound: f64,
    pub passed: bool,
}

/// Slack allowed over the theoretical modulus for floating-point error.
pub const CONTRACTION_SLACK: f64 = 1e-9;

/// Applies the operator to `n_pairs` random table pairs drawn uniformly from
/// `[-q_range, q_range]`, plus one constant-shift pair, and records the
/// largest observed sup-norm ratio.
pub fn verify_contraction(
    mdp: &FiniteMdp,
    cfg: &UnderestimateConfig,
    n_pairs: usize,
    q_range: f64,
    seed: u64,
) -> Result<ContractionReport> {
    cfg.validate()?;
    if n_pairs == 0 {
        return Err(Error::param("verify_contraction needs at least one pair"));
    }
    if !(q_range > 0.0 && q_range.is_finite()) {
        return Err(Error::param("q_range must be > 0"));
    }
    let bound = cfg.modulus_bound(mdp.discount());
    if !(bound > 0.0) {
        return Err(Error::Domain("iota * gamma must be > 0".into()));
    }
    let op = UnderestimatedOperator::new(mdp, cfg)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut rng = rng::stream(seed, &[0x7061_6972]);
    let mut random_table = || QTable::from_fn(ns, na, |_, _| rand::Rng::random_range(&mut rng, -q_range..=q_range));

    let ratio = |q1: &QTable, q2: &QTable| -> Result<f64> {
        let d = q1.sup_distance(q2);
        if d == 0.0 {
            return Ok(0.0);
        }
        Ok(op.apply(mdp, q1)?.sup_distance(&op.apply(mdp, q2)?) / d)
    };

    let mut max_ratio: f64 = 0.0;
    for _ in 0..n_pairs {
        let q1 = random_table();
        let q2 = random_table();
        max_ratio = max_ratio.max(ratio(&q1, &q2)?);
    }
    let base = random_table();
    let shifted = base.map(|v| v + 0.5 * q_range);
    let shift_pair_ratio = ratio(&base, &shifted)?;
    max_ratio = max_ratio.max(shift_pair_ratio);
    Ok(ContractionReport {
        interpretation: cfg.interpretation,
        pairs_tested: n_pairs + 1,
        max_ratio,
        shift_pair_ratio,
        bound,
        passed: max_ratio <= bound + CONTRACTION_SLACK,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub q: QTable,
    pub iterations: usize,
    pub final_residual: f64,
    /// Sup-norm step `||Q_{k+1} - Q_k||` of every iteration.
    pub residuals: Vec<f64>,
}

/// Iterates the underestimated operator from `Q = 0`.
pub fn fixed_point(mdp: &FiniteMdp, cfg: &UnderestimateConfig, tol: f64, max_iters: usize) -> Result<FixedPoint> {
    fixed_point_from(mdp, cfg, QTable::zeros(mdp.n_states(), mdp.n_actions()), tol, max_iters)
}

pub fn fixed_point_from(
    mdp: &FiniteMdp,
    cfg: &UnderestimateConfig,
    init: QTable,
    tol: f64,
    max_iters: usize,
) -> Result<FixedPoint> {
    if !(tol > 0.0) {
        return Err(Error::param("tolerance must be > 0"));
    }
    let op = UnderestimatedOperator::new(mdp, cfg)?;
    let mut q = init;
    let mut residuals = Vec::new();
    for it in 1..=max_iters {
        let next = op.apply(mdp, &q)?;
        let r = next.sup_distance(&q);
        residuals.push(r);
        q = next;
        if r < tol {
            return Ok(FixedPoint { q, iterations: it, final_residual: r, residuals });
        }
    }
    Err(Error::NoConvergence { iterations: max_iters, residual: residuals.last().copied().unwrap_or(f64::NAN) })
}

/// `Q*` minus the fixed point of `cfg`, elementwise.
pub fn underestimation_gap(mdp: &FiniteMdp, cfg: &UnderestimateConfig, tol: f64) -> Result<QTable> {
    let max_iters = 1_000_000;
    let optimal = fixed_point(mdp, &UnderestimateConfig::scaling(1.0), tol, max_iters)?;
    let under = fixed_point(mdp, cfg, tol, max_iters)?;
    Ok(optimal.q.zip_map(&under.q, |a, b| a - b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::finite_mdp::{random_mdp, single_state_mdp};

    #[test]
    fn zero_table_backs_up_rewards() {
        let m = random_mdp(4, 2, 1, 1.0).unwrap();
        let out = optimal_backup(&m, &QTable::zeros(4, 2)).unwrap();
        for s in 0..4 {
            for a in 0..2 {
                assert_eq!(out.get(s, a), m.reward(s, a));
            }
        }
    }

    #[test]
    fn scaling_at_one_is_optimal_backup() {
        let m = random_mdp(6, 3, 2, 0.5).unwrap();
        let q = QTable::from_fn(6, 3, |s, a| (s * 3 + a) as f64 * 0.37 - 2.0);
        let a = underestimated_backup(&m, &q, &UnderestimateConfig::scaling(1.0)).unwrap();
        let b = optimal_backup(&m, &q).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_quantile_is_optimal_backup() {
        let m = random_mdp(5, 2, 3, 1.0).unwrap();
        let q = QTable::from_fn(5, 2, |s, a| (s as f64).sin() + a as f64);
        for iota in [0.1, 0.5, 1.0] {
            let cfg = UnderestimateConfig::noisy_quantile(iota, 0.0);
            assert_eq!(underestimated_backup(&m, &q, &cfg).unwrap(), optimal_backup(&m, &q).unwrap());
        }
    }

    #[test]
    fn config_validation() {
        assert!(UnderestimateConfig::scaling(0.0).validate().is_err());
        assert!(UnderestimateConfig::scaling(1.1).validate().is_err());
        assert!(UnderestimateConfig::noisy_quantile(0.5, -1.0).validate().is_err());
        assert!(UnderestimateConfig::expectile(1.0, 1.0).validate().is_err());
        assert!(UnderestimateConfig::noisy_quantile(0.5, 1.0).with_noise(10, 0).validate().is_err());
    }

    #[test]
    fn quantile_interpolates() {
        let mut xs = [3.0, 1.0, 2.0, 4.0];
        assert_eq!(empirical_quantile(&mut xs, 0.0), 1.0);
        assert_eq!(empirical_quantile(&mut xs, 1.0), 4.0);
        assert!((empirical_quantile(&mut xs, 0.5) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn scalar_fixed_point() {
        let m = single_state_mdp(1.0, 0.5).unwrap();
        let fp = fixed_point(&m, &UnderestimateConfig::scaling(0.8), 1e-13, 10_000).unwrap();
        assert!((fp.q.get(0, 0) - 4.0 / 3.0).abs() < 1e-11);
    }

    #[test]
    fn fixed_point_budget_exhaustion() {
        let m = random_mdp(4, 2, 0, 1.0).unwrap();
        assert!(matches!(
            fixed_point(&m, &UnderestimateConfig::scaling(1.0), 1e-12, 3),
            Err(Error::NoConvergence { iterations: 3, .. })
        ));
    }

    #[test]
    fn masked_max_ignores_disallowed_actions() {
        let m = crate::finite_mdp::chain_mdp(2, 0.5).unwrap();
        let q = QTable::from_vec(2, 2, vec![10.0, 0.0, 10.0, 0.0]).unwrap();
        let mask = ActionMask::new(2, 2, vec![false, true, false, true]).unwrap();
        let out = optimal_backup_masked(&m, &q, Some(&mask)).unwrap();
        assert_eq!(out.get(0, 0), 0.0);
        assert!(ActionMask::new(2, 2, vec![false, false, true, true]).is_err());
    }

    #[test]
    fn zero_pairs_rejected() {
        let m = random_mdp(3, 2, 0, 1.0).unwrap();
        assert!(verify_contraction(&m, &UnderestimateConfig::scaling(0.5), 0, 1.0, 0).is_err());
        assert!(verify_contraction(&m, &UnderestimateConfig::scaling(0.0), 5, 1.0, 0).is_err());
    }

    #[test]
    fn gap_vanishes_at_iota_one() {
        let m = random_mdp(5, 2, 8, 1.0).unwrap();
        let gap = underestimation_gap(&m, &UnderestimateConfig::scaling(1.0), 1e-10).unwrap();
        assert!(gap.values().iter().all(|&g| g == 0.0));
    }
}
