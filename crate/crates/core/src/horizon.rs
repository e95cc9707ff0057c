//! Effective-horizon analysis: closed forms, budget bounds and empirical
//! estimates on drift chains.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CapsError, Result};
use crate::mcmc::{run_receding_horizon, BlockSelector};
use crate::policy::{make_drift_chain_policy, DriftChainSpec};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// Minimum number of episodes for an empirical horizon estimate.
pub const MIN_TRIALS: usize = 100;

fn open_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(CapsError::InvalidParameter(format!(
            "{name} must lie in (0, 1), got {v}"
        )))
    }
}

fn check_eps_eta(eps: f64, eta: f64) -> Result<()> {
    if eps == 0.0 {
        return Err(CapsError::UnboundedHorizon);
    }
    open_unit("eps", eps)?;
    open_unit("eta", eta)
}

/// `max{T : (1-ε)^T ≥ η}`.
pub fn effective_horizon_exact(eps: f64, eta: f64) -> Result<u64> {
    check_eps_eta(eps, eta)?;
    let survive = |t: u64| (1.0 - eps).powf(t as f64);
    let mut t = (eta.ln() / (-eps).ln_1p()).floor().max(0.0) as u64;
    // The log-domain estimate can be off by one at exact boundaries.
    while survive(t + 1) >= eta {
        t += 1;
    }
    while t > 0 && survive(t) < eta {
        t -= 1;
    }
    Ok(t)
}

/// `-ln η / ε`, the exponential approximation of the horizon.
pub fn effective_horizon_approx(eps: f64, eta: f64) -> Result<f64> {
    check_eps_eta(eps, eta)?;
    Ok(-eta.ln() / eps)
}

/// `ε^(1-α)`.
pub fn ideal_extension_ratio(eps: f64, alpha: f64) -> f64 {
    eps.powf(1.0 - alpha)
}

/// Normalised two-outcome power mass of the drift action: `ε^α / (ε^α + (1-ε)^α)`.
pub fn sharpened_error(eps: f64, alpha: f64) -> f64 {
    let a = eps.powf(alpha);
    a / (a + (1.0 - eps).powf(alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonParams {
    pub eps: f64,
    pub alpha: f64,
    pub eta: f64,
    /// ρ: geometric convergence rate of the chain.
    pub mixing_rate: f64,
    /// C: initial distance to the target.
    pub dist_const: f64,
    /// N: MCMC iterations per decision.
    pub budget: f64,
}

impl HorizonParams {
    pub fn validate(&self) -> Result<()> {
        open_unit("eps", self.eps)?;
        open_unit("eta", self.eta)?;
        open_unit("mixing_rate", self.mixing_rate)?;
        if !(self.alpha >= 1.0) || !(self.dist_const > 0.0) || !(self.budget >= 0.0) {
            return Err(CapsError::InvalidParameter(
                "need alpha >= 1, dist_const > 0 and budget >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// `ε / (ε^α + C ρ^N)`.
pub fn asymptotic_extension_ratio(p: &HorizonParams) -> f64 {
    p.eps / (p.eps.powf(p.alpha) + p.dist_const * p.mixing_rate.powf(p.budget))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetBound {
    pub n_min: f64,
    /// `N_phys > N_min`, when a physical budget was supplied.
    pub feasible: Option<bool>,
}

/// `N_min = (α ln ε − ln C) / ln ρ`.
pub fn min_budget(
    eps: f64,
    alpha: f64,
    dist_const: f64,
    mixing_rate: f64,
    physical_budget: Option<f64>,
) -> Result<BudgetBound> {
    open_unit("eps", eps)?;
    open_unit("mixing_rate", mixing_rate)?;
    if !(dist_const > 0.0) {
        return Err(CapsError::InvalidParameter("dist_const must be > 0".into()));
    }
    let n_min = (alpha * eps.ln() - dist_const.ln()) / mixing_rate.ln();
    Ok(BudgetBound {
        n_min,
        feasible: physical_budget.map(|n| n > n_min),
    })
}

/// `min(1, C e^{-β·snr})`.
pub fn drift_error_bound(snr: f64, c_const: f64, beta_const: f64) -> f64 {
    (c_const * (-beta_const * snr).exp()).min(1.0)
}

/// `T (1 + f N)` policy evaluations.
pub fn cost_model(horizon: f64, trigger_fraction: f64, n_mcmc: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&trigger_fraction) {
        return Err(CapsError::InvalidParameter(format!(
            "trigger_fraction must lie in [0, 1], got {trigger_fraction}"
        )));
    }
    Ok(horizon * (1.0 + trigger_fraction * n_mcmc))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub t_eff_exact: u64,
    pub t_eff_approx: f64,
    pub extension_ratio_ideal: f64,
    pub extension_ratio_asymptotic: f64,
    pub n_min: f64,
}

pub fn horizon_report(p: &HorizonParams) -> Result<HorizonReport> {
    p.validate()?;
    Ok(HorizonReport {
        t_eff_exact: effective_horizon_exact(p.eps, p.eta)?,
        t_eff_approx: effective_horizon_approx(p.eps, p.eta)?,
        extension_ratio_ideal: ideal_extension_ratio(p.eps, p.alpha),
        extension_ratio_asymptotic: asymptotic_extension_ratio(p),
        n_min: min_budget(p.eps, p.alpha, p.dist_const, p.mixing_rate, None)?.n_min,
    })
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: u64, trials: u64, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    // The bounds are exact at the extremes; the formula leaves rounding residue.
    let lo = if successes == 0 {
        0.0
    } else {
        (centre - half).max(0.0)
    };
    let hi = if successes == trials {
        1.0
    } else {
        (centre + half).min(1.0)
    };
    (lo, hi)
}

/// `[[1-a, a], [b, 1-b]]` with stationary law `(b, a)/(a+b)` and second
/// eigenvalue `1 - a - b`.
pub fn two_state_kernel(a: f64, b: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    (
        vec![vec![1.0 - a, a], vec![b, 1.0 - b]],
        vec![b / (a + b), a / (a + b)],
    )
}

/// TV distance to `target` after `0..=n_max` steps from a point mass on `start`.
pub fn convergence_curve(
    kernel: &[Vec<f64>],
    target: &[f64],
    start: usize,
    n_max: usize,
) -> Result<Vec<f64>> {
    let k = kernel.len();
    if target.len() != k || start >= k {
        return Err(CapsError::NonStochasticKernel("dimension mismatch".into()));
    }
    for (i, row) in kernel.iter().enumerate() {
        let total: f64 = row.iter().sum();
        if row.len() != k || row.iter().any(|v| !(*v >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(CapsError::NonStochasticKernel(format!("row {i}")));
        }
    }
    let tv = |d: &[f64]| {
        0.5 * d
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    };
    let mut dist = vec![0.0; k];
    dist[start] = 1.0;
    let mut curve = Vec::with_capacity(n_max + 1);
    curve.push(tv(&dist));
    for _ in 0..n_max {
        let mut next = vec![0.0; k];
        for (i, &m) in dist.iter().enumerate() {
            for (j, &t) in kernel[i].iter().enumerate() {
                next[j] += m * t;
            }
        }
        dist = next;
        curve.push(tv(&dist));
    }
    Ok(curve)
}

/// Empirical effective horizon of a sampler on a drift chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonEstimate {
    pub trials: usize,
    /// Longest horizon tested (the chain length).
    pub max_tested: usize,
    /// Largest T whose success-rate lower confidence bound is at least η.
    pub t_eff_hat: usize,
    pub ci_low: usize,
    /// Largest T whose success-rate upper confidence bound is at least η.
    pub ci_high: usize,
    /// `successes[T]`: episodes without failure in the first T steps.
    pub successes: Vec<u64>,
    pub pivot_visits: u64,
    pub pivot_errors: u64,
    pub policy_calls: u64,
}

impl HorizonEstimate {
    pub fn per_pivot_error(&self) -> f64 {
        if self.pivot_visits == 0 {
            0.0
        } else {
            self.pivot_errors as f64 / self.pivot_visits as f64
        }
    }
}

/// Runs `trials` full-length episodes on the drift chain `env` and reads
/// success at every horizon `T ≤ env.horizon` from first-failure times.
/// Trial `i` uses stream `i` of a ChaCha8 generator seeded with `seed`.
pub fn estimate_empirical_horizon(
    env: &DriftChainSpec,
    selector: &BlockSelector,
    trials: usize,
    eta: f64,
    seed: u64,
) -> Result<HorizonEstimate> {
    if trials < MIN_TRIALS {
        return Err(CapsError::UnderpoweredEstimate {
            trials,
            min: MIN_TRIALS,
        });
    }
    open_unit("eta", eta)?;
    let policy = make_drift_chain_policy(env)?;
    let t_max = env.horizon;
    let outcomes: Vec<(Option<usize>, u64)> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(trial as u64);
            run_receding_horizon(&policy, selector, t_max, &mut rng)
                .map(|t| (t.failure_step, t.policy_calls))
        })
        .collect::<Result<_>>()?;

    let mut successes = vec![0u64; t_max + 1];
    let (mut visits, mut errors, mut calls) = (0u64, 0u64, 0u64);
    for &(fail, c) in &outcomes {
        calls += c;
        let survived = fail.map_or(t_max, |s| s - 1);
        for s in successes.iter_mut().take(survived + 1) {
            *s += 1;
        }
        for step in 0..t_max {
            if fail.is_some_and(|s| s <= step) {
                break;
            }
            if env.is_pivot(step) {
                visits += 1;
                if fail == Some(step + 1) {
                    errors += 1;
                }
            }
        }
    }
    let n = trials as u64;
    let last = |keep: &dyn Fn(u64) -> bool| {
        (0..=t_max)
            .filter(|&t| keep(successes[t]))
            .max()
            .unwrap_or(0)
    };
    let t_hat = last(&|s| wilson_interval(s, n, Z_95).0 >= eta);
    let t_high = last(&|s| wilson_interval(s, n, Z_95).1 >= eta);
    Ok(HorizonEstimate {
        trials,
        max_tested: t_max,
        t_eff_hat: t_hat,
        ci_low: t_hat,
        ci_high: t_high,
        successes,
        pivot_visits: visits,
        pivot_errors: errors,
        policy_calls: calls,
    })
}
