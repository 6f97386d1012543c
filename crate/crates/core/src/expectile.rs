//! Asymmetric squared loss `L_tau(u) = |tau - 1(u < 0)| u^2` and expectiles.

use crate::error::{Error, Result};

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!("expectile level must lie in (0, 1), got {tau}")))
    }
}

/// Expectile loss at a fixed level `tau`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpectileLoss {
    tau: f64,
}

impl ExpectileLoss {
    pub fn new(tau: f64) -> Result<Self> {
        check_tau(tau)?;
        Ok(Self { tau })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    fn weight(&self, u: f64) -> f64 {
        if u < 0.0 {
            1.0 - self.tau
        } else {
            self.tau
        }
    }

    pub fn value(&self, u: f64) -> f64 {
        self.weight(u) * u * u
    }

    /// Derivative in `u`; zero at the kink `u = 0`.
    pub fn grad(&self, u: f64) -> f64 {
        2.0 * self.weight(u) * u
    }
}

pub fn loss(tau: f64, u: f64) -> Result<f64> {
    Ok(ExpectileLoss::new(tau)?.value(u))
}

pub fn loss_grad(tau: f64, u: f64) -> Result<f64> {
    Ok(ExpectileLoss::new(tau)?.grad(u))
}

/// Weighted `tau`-expectile of `samples`: the minimiser of
/// `sum_i w_i L_tau(x_i - e)`.
///
/// Solves the first-order condition
/// `tau * sum w (x - e)_+ = (1 - tau) * sum w (e - x)_+` by bisection on
/// `[min x, max x]`. `weights = None` means uniform.
pub fn solve_expectile(samples: &[f64], weights: Option<&[f64]>, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if samples.is_empty() {
        return Err(Error::Empty("expectile samples"));
    }
    if samples.iter().any(|x| !x.is_finite()) {
        return Err(Error::param("expectile samples must be finite"));
    }
    if let Some(w) = weights {
        if w.len() != samples.len() {
            return Err(Error::Shape(format!("{} samples but {} weights", samples.len(), w.len())));
        }
        if w.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::param("expectile weights must be non-negative"));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::param(format!("expectile weights sum to {total}, expected 1")));
        }
    }
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);
    // Decreasing in e; root is the expectile.
    let foc = |e: f64| -> f64 {
        let (mut above, mut below) = (0.0, 0.0);
        for (i, &x) in samples.iter().enumerate() {
            let d = x - e;
            if d > 0.0 {
                above += weight(i) * d;
            } else {
                below -= weight(i) * d;
            }
        }
        tau * above - (1.0 - tau) * below
    };
    let mut lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if foc(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// How the expectile level of a TD residual is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TdConvention {
    /// Residual `u = q_pred - target`; `tau` weighs over-predictions, so
    /// `tau > 0.5` pulls the critic below its target.
    Literal,
    /// Residual `u = target - q_pred`; `tau` is the usual expectile level, so
    /// `tau < 0.5` underestimates. Equivalent to `Literal` at `1 - tau`.
    UnderestimateIql,
}

impl TdConvention {
    /// Converts `tau` read under `self` into the over-prediction weight.
    pub fn to_literal(self, tau: f64) -> f64 {
        match self {
            TdConvention::Literal => tau,
            TdConvention::UnderestimateIql => 1.0 - tau,
        }
    }
}

/// Expectile TD loss for one transition and its gradient in `q_pred`.
///
/// The target `reward + gamma * q_target_next` is treated as a constant.
pub fn td_expectile_residual(
    q_pred: f64,
    reward: f64,
    q_target_next: f64,
    gamma: f64,
    tau: f64,
    convention: TdConvention,
) -> Result<(f64, f64)> {
    check_tau(tau)?;
    let target = reward + gamma * q_target_next;
    let literal = ExpectileLoss::new(convention.to_literal(tau))?;
    let mirrored = ExpectileLoss::new(1.0 - literal.tau())?;
    let u = q_pred - target;
    let (value, grad) = match convention {
        TdConvention::Literal => (literal.value(u), literal.grad(u)),
        // d/dq of L(target - q) is -L'(target - q)
        TdConvention::UnderestimateIql => (mirrored.value(-u), -mirrored.grad(-u)),
    };
    debug_assert!((value - literal.value(u)).abs() <= 1e-12 * value.abs().max(1.0), "conventions disagree");
    Ok((value, grad))
}
