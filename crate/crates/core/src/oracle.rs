//! Exact enumeration of trajectory distributions.
//!
//! Everything here is brute force over the reachable trajectory space and
//! exists to give samplers a ground truth. Sums run through
//! [`log_sum_exp`] so large sharpening exponents do not underflow.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CapsError, Result};
use crate::logspace::{format_significant, log_sum_exp, tempered_log_probs};
use crate::policy::{NodeId, PolicyModel, Trajectory};

/// Default limit on the number of enumerated trajectories.
pub const DEFAULT_ENUMERATION_CAP: usize = 1_000_000;

/// Exact probability table over complete trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionTable {
    action_count: usize,
    entries: BTreeMap<Vec<usize>, f64>,
    log_normalizer: f64,
}

impl DistributionTable {
    /// Builds a table from unnormalised log-weights.
    pub fn from_log_weights(action_count: usize, weights: Vec<(Vec<usize>, f64)>) -> Self {
        let logs: Vec<f64> = weights.iter().map(|(_, w)| *w).collect();
        let z = log_sum_exp(&logs);
        let entries = weights
            .into_iter()
            .map(|(t, w)| (t, (w - z).exp()))
            .collect();
        Self {
            action_count,
            entries,
            log_normalizer: z,
        }
    }

    /// Empirical table over the support of `template` from visit counts.
    /// Any counted trajectory outside that support is a support mismatch.
    pub fn from_counts(
        template: &DistributionTable,
        counts: &HashMap<Vec<usize>, u64>,
    ) -> Result<Self> {
        let total: u64 = counts.values().sum();
        if total == 0 {
            return Err(CapsError::InvalidParameter("no samples to tabulate".into()));
        }
        if counts.keys().any(|k| !template.entries.contains_key(k)) {
            return Err(CapsError::SupportMismatch);
        }
        let entries = template
            .entries
            .keys()
            .map(|k| {
                let c = counts.get(k).copied().unwrap_or(0);
                (k.clone(), c as f64 / total as f64)
            })
            .collect();
        Ok(Self {
            action_count: template.action_count,
            entries,
            log_normalizer: (total as f64).ln(),
        })
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    /// Natural log of the partition value used to normalise the table.
    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn probability(&self, actions: &[usize]) -> f64 {
        self.entries.get(actions).copied().unwrap_or(0.0)
    }

    /// Entries in lexicographic trajectory order.
    pub fn iter(&self) -> impl Iterator<Item = (&Vec<usize>, f64)> {
        self.entries.iter().map(|(k, v)| (k, *v))
    }

    pub fn total_mass(&self) -> f64 {
        self.entries.values().sum()
    }

    /// Mass of each first action.
    pub fn first_action_marginals(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.action_count];
        for (t, p) in &self.entries {
            if let Some(&a) = t.first() {
                m[a] += p;
            }
        }
        m
    }

    /// Draws a trajectory by inverse CDF over the lexicographic order.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &[usize] {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = None;
        for (t, &p) in &self.entries {
            if p > 0.0 {
                acc += p;
                last = Some(t);
                if u < acc {
                    return t;
                }
            }
        }
        last.map(|t| t.as_slice()).unwrap_or(&[])
    }

    /// `trajectory,probability` CSV: dash-joined actions, 12 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("trajectory,probability\n");
        for (t, p) in &self.entries {
            let key: Vec<String> = t.iter().map(|a| a.to_string()).collect();
            let _ = writeln!(out, "{},{}", key.join("-"), format_significant(*p, 12));
        }
        out
    }
}

struct Enumerated {
    actions: Vec<usize>,
    base: f64,
    local: f64,
}

/// Depth-first enumeration of every positive-probability path of `len`
/// steps from `start`. `local_exponent` additionally accumulates the
/// per-step tempered log-probability.
fn enumerate(
    policy: &PolicyModel,
    start: NodeId,
    len: usize,
    local_exponent: Option<f64>,
    cap: usize,
) -> Result<Vec<Enumerated>> {
    let len = len.min(policy.remaining(start));
    let mut walk = Walk {
        policy,
        local_exponent,
        cap,
        actions: Vec::with_capacity(len),
        out: Vec::new(),
    };
    walk.descend(start, len, 0.0, 0.0)?;
    Ok(walk.out)
}

struct Walk<'a> {
    policy: &'a PolicyModel,
    local_exponent: Option<f64>,
    cap: usize,
    actions: Vec<usize>,
    out: Vec<Enumerated>,
}

impl Walk<'_> {
    fn descend(&mut self, node: NodeId, remaining: usize, base: f64, local: f64) -> Result<()> {
        if remaining == 0 {
            if self.out.len() == self.cap {
                return Err(CapsError::EnumerationCapExceeded { cap: self.cap });
            }
            self.out.push(Enumerated {
                actions: self.actions.clone(),
                base,
                local,
            });
            return Ok(());
        }
        let logs = self.policy.log_dist(node);
        let local_logs = self.local_exponent.map(|e| tempered_log_probs(logs, e));
        for (a, &lp) in logs.iter().enumerate() {
            if lp == f64::NEG_INFINITY {
                continue;
            }
            let next = self
                .policy
                .next(node, a)
                .expect("positive mass has a successor");
            let step_local = local_logs.as_ref().map_or(0.0, |l| l[a]);
            self.actions.push(a);
            self.descend(next, remaining - 1, base + lp, local + step_local)?;
            self.actions.pop();
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha >= 1.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(CapsError::InvalidParameter(format!(
            "alpha must be finite and >= 1, got {alpha}"
        )))
    }
}

/// Global power distribution `p(τ)^α / Z` over complete trajectories.
pub fn enumerate_global_power(policy: &PolicyModel, alpha: f64) -> Result<DistributionTable> {
    enumerate_global_power_from(
        policy,
        policy.root(),
        policy.horizon(),
        alpha,
        DEFAULT_ENUMERATION_CAP,
    )
}

/// Power distribution over the `len`-step continuations of `start`,
/// conditioned on having reached `start`.
pub fn enumerate_global_power_from(
    policy: &PolicyModel,
    start: NodeId,
    len: usize,
    alpha: f64,
    cap: usize,
) -> Result<DistributionTable> {
    check_alpha(alpha)?;
    let paths = enumerate(policy, start, len, None, cap)?;
    let weights = paths
        .into_iter()
        .map(|e| (e.actions, alpha * e.base))
        .collect();
    Ok(DistributionTable::from_log_weights(
        policy.action_space().size(),
        weights,
    ))
}

/// Locally tempered distribution `Π_t p(a_t|a_<t)^α / Z_t(a_<t)`.
pub fn enumerate_local_tempered(policy: &PolicyModel, alpha: f64) -> Result<DistributionTable> {
    enumerate_local_tempered_from(
        policy,
        policy.root(),
        policy.horizon(),
        alpha,
        DEFAULT_ENUMERATION_CAP,
    )
}

pub fn enumerate_local_tempered_from(
    policy: &PolicyModel,
    start: NodeId,
    len: usize,
    alpha: f64,
    cap: usize,
) -> Result<DistributionTable> {
    check_alpha(alpha)?;
    let paths = enumerate(policy, start, len, Some(alpha), cap)?;
    let weights = paths.into_iter().map(|e| (e.actions, e.local)).collect();
    Ok(DistributionTable::from_log_weights(
        policy.action_space().size(),
        weights,
    ))
}

/// Every positive-probability action sequence of `len` steps from `start`,
/// in lexicographic order.
pub fn enumerate_paths(
    policy: &PolicyModel,
    start: NodeId,
    len: usize,
    cap: usize,
) -> Result<Vec<Vec<usize>>> {
    Ok(enumerate(policy, start, len, None, cap)?
        .into_iter()
        .map(|e| e.actions)
        .collect())
}

/// Base trajectory distribution (`α = 1`).
pub fn enumerate_base(policy: &PolicyModel) -> Result<DistributionTable> {
    enumerate_global_power(policy, 1.0)
}

/// Total variation distance `½ Σ |d1 - d2|`. Both tables must share a support.
pub fn tv_distance(d1: &DistributionTable, d2: &DistributionTable) -> Result<f64> {
    if d1.entries.len() != d2.entries.len() || d1.entries.keys().ne(d2.entries.keys()) {
        return Err(CapsError::SupportMismatch);
    }
    let sum: f64 = d1
        .entries
        .values()
        .zip(d2.entries.values())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok((0.5 * sum).clamp(0.0, 1.0))
}

/// First-action comparison between a good and a bad action.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreferenceReport {
    pub first_action_marginals: Vec<f64>,
    /// The better of `good_action` and `bad_action` by marginal mass.
    pub preferred_action: usize,
    /// Unnormalised mass of trajectories opening with the good action.
    pub score_good: f64,
    /// Unnormalised mass of trajectories opening with the bad action.
    pub score_bad: f64,
}

/// Marginalises `dist` over continuations and compares `good_action` with
/// `bad_action`; ties go to the lower index.
pub fn first_action_preference(
    dist: &DistributionTable,
    good_action: usize,
    bad_action: usize,
) -> PreferenceReport {
    let marginals = dist.first_action_marginals();
    let z = dist.log_normalizer.exp();
    let (mg, mb) = (marginals[good_action], marginals[bad_action]);
    let preferred_action = if mg > mb || (mg == mb && good_action < bad_action) {
        good_action
    } else {
        bad_action
    };
    PreferenceReport {
        score_good: mg * z,
        score_bad: mb * z,
        first_action_marginals: marginals,
        preferred_action,
    }
}

/// Sharpening level at which global power sampling stops preferring the
/// dispersed bad action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlipThreshold {
    /// Exact root of `ε^α = ε′^α · N^(1-α)`: `ln N / (ln N − ln(ε′/ε))`.
    pub exact: f64,
    /// The closed form `ln(ε′/ε)/ln N + 1`. It is only an approximation of
    /// the root above and is reported for comparison.
    pub approx: f64,
}

pub fn flip_threshold(eps: f64, eps_prime: f64, branches: usize) -> Result<FlipThreshold> {
    if !(eps > 0.0 && eps <= eps_prime) {
        return Err(CapsError::InvalidParameter(format!(
            "need 0 < eps <= eps_prime, got {eps} and {eps_prime}"
        )));
    }
    if branches < 2 {
        return Err(CapsError::InvalidParameter(
            "need at least 2 branches".into(),
        ));
    }
    let ln_n = (branches as f64).ln();
    let ln_ratio = (eps_prime / eps).ln();
    if ln_n <= ln_ratio {
        return Err(CapsError::NoFiniteFlipThreshold { ln_n, ln_ratio });
    }
    Ok(FlipThreshold {
        exact: ln_n / (ln_n - ln_ratio),
        approx: ln_ratio / ln_n + 1.0,
    })
}

/// Locates the flip point by bisection on the enumerated global power
/// preference. Requires the bad action to be preferred at `lo` and the good
/// action at `hi`.
pub fn bisect_flip_point(
    policy: &PolicyModel,
    good_action: usize,
    bad_action: usize,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
) -> Result<f64> {
    let prefers_good = |alpha: f64| -> Result<bool> {
        let d = enumerate_global_power(policy, alpha)?;
        Ok(first_action_preference(&d, good_action, bad_action).preferred_action == good_action)
    };
    if prefers_good(lo)? || !prefers_good(hi)? {
        return Err(CapsError::InvalidParameter(format!(
            "preference does not flip inside [{lo}, {hi}]"
        )));
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if prefers_good(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Per-step argmax trajectory over the full horizon (lowest index on ties).
pub fn greedy_trajectory(policy: &PolicyModel) -> Trajectory {
    policy.greedy_from(policy.root(), policy.horizon())
}

/// Base-policy probability of completing the horizon without entering a
/// failure state.
pub fn success_mass(policy: &PolicyModel) -> Result<f64> {
    let base = enumerate_base(policy)?;
    let mut mass = 0.0;
    for (t, p) in base.iter() {
        if !policy.fails_along(policy.root(), t)? {
            mass += p;
        }
    }
    Ok(mass)
}
