//! Uncertainty signals and the System 1 / System 2 switch.

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{CapsError, Result};
use crate::policy::{NodeId, PolicyModel};

/// Normalisation tolerance accepted by the entropy functions.
pub const DISTRIBUTION_TOL: f64 = 1e-9;

fn check_distribution(dist: &[f64]) -> Result<()> {
    if dist.is_empty() || dist.iter().any(|p| !(*p >= 0.0)) {
        return Err(CapsError::NotADistribution(f64::NAN));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOL {
        return Err(CapsError::NotADistribution(total));
    }
    Ok(())
}

fn entropy_unchecked(dist: &[f64]) -> f64 {
    -dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// `-Σ p ln p` in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(dist: &[f64]) -> Result<f64> {
    check_distribution(dist)?;
    Ok(entropy_unchecked(dist))
}

/// `ln|A| - H(dist)`: the distance of the policy from the uniform noise floor.
pub fn contextual_snr(dist: &[f64]) -> Result<f64> {
    Ok((dist.len() as f64).ln() - shannon_entropy(dist)?)
}

/// Direct `D_KL(dist ‖ uniform) = Σ p ln(p |A|)`.
pub fn kl_to_uniform(dist: &[f64]) -> Result<f64> {
    check_distribution(dist)?;
    let n = dist.len() as f64;
    Ok(dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * (p * n).ln())
        .sum())
}

/// Mean step entropy along `block`, starting after `prefix`.
pub fn block_average_entropy(
    policy: &PolicyModel,
    prefix: &[usize],
    block: &[usize],
) -> Result<f64> {
    let start = policy.locate(prefix)?;
    Ok(block_signals(policy, start, block)?.mean_entropy)
}

/// Uncertainty signals of a realised block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockSignals {
    /// Average step entropy in nats.
    pub mean_entropy: f64,
    /// Smallest probability of an executed action.
    pub min_prob: f64,
}

/// Signals along `block` from the state `start`.
pub fn block_signals(policy: &PolicyModel, start: NodeId, block: &[usize]) -> Result<BlockSignals> {
    let path = policy.path(start, block)?;
    if block.is_empty() {
        return Ok(BlockSignals {
            mean_entropy: 0.0,
            min_prob: 1.0,
        });
    }
    let mut entropy = 0.0;
    let mut min_prob = f64::INFINITY;
    for (&node, &a) in path.iter().zip(block) {
        let d = policy.dist(node);
        entropy += entropy_unchecked(d);
        min_prob = min_prob.min(d[a]);
    }
    Ok(BlockSignals {
        mean_entropy: entropy / block.len() as f64,
        min_prob,
    })
}

/// Signals of consecutive blocks along the full greedy path from the
/// initial state. The last block may be shorter than `block_len`.
pub fn greedy_path_signals(policy: &PolicyModel, block_len: usize) -> Result<Vec<BlockSignals>> {
    if block_len == 0 {
        return Err(CapsError::InvalidParameter("block_len must be >= 1".into()));
    }
    let mut node = policy.root();
    let mut out = Vec::new();
    while policy.remaining(node) > 0 {
        let block = policy.greedy_from(node, block_len);
        out.push(block_signals(policy, node, &block.actions)?);
        node = policy.walk(node, &block.actions)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMetric {
    /// Search when block-average entropy exceeds the threshold.
    Entropy,
    /// Search when the least likely executed action falls below the threshold.
    MinProb,
    /// Search with probability `random_rate`.
    Random,
    Always,
    Never,
}

impl GateMetric {
    pub const ALLOWED: [&'static str; 5] = ["entropy", "min_prob", "random", "always", "never"];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateMode {
    System1,
    System2,
}

impl GateMode {
    pub fn is_search(self) -> bool {
        self == GateMode::System2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateConfig {
    pub metric: GateMetric,
    /// γ: nats for the entropy metric, a probability for `min_prob`.
    #[serde(
        default,
        alias = "threshold_nats",
        serialize_with = "ser_threshold",
        deserialize_with = "de_threshold"
    )]
    pub threshold: f64,
    #[serde(default)]
    pub random_rate: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self::entropy(0.5)
    }
}

impl GateConfig {
    pub fn entropy(threshold: f64) -> Self {
        Self {
            metric: GateMetric::Entropy,
            threshold,
            random_rate: 0.0,
        }
    }

    pub fn min_prob(threshold: f64) -> Self {
        Self {
            metric: GateMetric::MinProb,
            threshold,
            random_rate: 0.0,
        }
    }

    pub fn random(rate: f64) -> Self {
        Self {
            metric: GateMetric::Random,
            threshold: 0.0,
            random_rate: rate,
        }
    }

    pub fn always() -> Self {
        Self {
            metric: GateMetric::Always,
            threshold: 0.0,
            random_rate: 0.0,
        }
    }

    pub fn never() -> Self {
        Self {
            metric: GateMetric::Never,
            threshold: f64::INFINITY,
            random_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0) {
            return Err(CapsError::InvalidParameter(format!(
                "gate threshold must be >= 0, got {}",
                self.threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.random_rate) {
            return Err(CapsError::InvalidParameter(format!(
                "random_rate must lie in [0, 1], got {}",
                self.random_rate
            )));
        }
        Ok(())
    }
}

// JSON has no infinity; accept and emit the string "inf".
fn ser_threshold<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_threshold<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(t) if matches!(t.as_str(), "inf" | "infinity" | "Infinity") => Ok(f64::INFINITY),
        Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid threshold {t:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub mode: GateMode,
    /// Metric value that was compared (the uniform draw for `random`).
    pub signal_value: f64,
    pub threshold_used: f64,
}

/// Hard-threshold switch. Only the `random` metric consumes randomness.
pub fn gate<R: Rng + ?Sized>(
    signals: &BlockSignals,
    config: &GateConfig,
    rng: &mut R,
) -> GateDecision {
    let (fire, signal_value, threshold_used) = match config.metric {
        GateMetric::Entropy => (
            signals.mean_entropy > config.threshold,
            signals.mean_entropy,
            config.threshold,
        ),
        GateMetric::MinProb => (
            signals.min_prob < config.threshold,
            signals.min_prob,
            config.threshold,
        ),
        GateMetric::Random => {
            let u: f64 = rng.random();
            (u < config.random_rate, u, config.random_rate)
        }
        GateMetric::Always => (true, signals.mean_entropy, 0.0),
        GateMetric::Never => (false, signals.mean_entropy, f64::INFINITY),
    };
    GateDecision {
        mode: if fire {
            GateMode::System2
        } else {
            GateMode::System1
        },
        signal_value,
        threshold_used,
    }
}

/// SNR threshold `γ* = ε⁻¹(λC₂)` for a strictly decreasing error curve on
/// `[lo, hi]`. Search pays off exactly when `SNR < γ*`.
///
/// A cost at or above `ε(lo)` returns `lo`: search never pays.
pub fn threshold_from_budget<F: Fn(f64) -> f64>(
    cost_scaled: f64,
    error_curve: F,
    lo: f64,
    hi: f64,
) -> Result<f64> {
    if !(lo < hi) {
        return Err(CapsError::InvalidParameter(format!(
            "empty SNR domain [{lo}, {hi}]"
        )));
    }
    let (e_lo, e_hi) = (error_curve(lo), error_curve(hi));
    if !(e_lo > e_hi) {
        return Err(CapsError::InvalidParameter(
            "error curve is not decreasing".into(),
        ));
    }
    if cost_scaled >= e_lo {
        return Ok(lo);
    }
    if !(cost_scaled > e_hi) {
        return Err(CapsError::BudgetOutOfRange(format!(
            "λ·C₂ = {cost_scaled} lies below the error curve on [{lo}, {hi}]"
        )));
    }
    let (mut a, mut b) = (lo, hi);
    while b - a > 1e-10 {
        let mid = 0.5 * (a + b);
        if error_curve(mid) > cost_scaled {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok(0.5 * (a + b))
}

/// Threshold that makes the gate fire on about `target_fraction` of the
/// given signals. For `min_prob` the gate fires below the threshold, for
/// `entropy` above it. The threshold is placed midway between neighbouring
/// sorted signals so ties are never split.
pub fn calibrate_threshold(
    metric: GateMetric,
    signals: &[f64],
    target_fraction: f64,
) -> Result<f64> {
    if signals.is_empty() || !(0.0..=1.0).contains(&target_fraction) {
        return Err(CapsError::InvalidParameter(
            "calibration needs signals and a fraction in [0, 1]".into(),
        ));
    }
    let mut sorted = signals.to_vec();
    // Sort so that the blocks that should fire first come first.
    match metric {
        GateMetric::Entropy => sorted.sort_by(|a, b| b.total_cmp(a)),
        GateMetric::MinProb => sorted.sort_by(|a, b| a.total_cmp(b)),
        _ => {
            return Err(CapsError::InvalidParameter(
                "only entropy and min_prob gates have a threshold".into(),
            ))
        }
    }
    let k = (target_fraction * sorted.len() as f64).round() as usize;
    let gamma = match (k, metric) {
        (0, GateMetric::Entropy) => sorted[0],
        (0, _) => 0.0,
        (k, GateMetric::Entropy) if k == sorted.len() => 0.0,
        (k, _) if k == sorted.len() => sorted[k - 1] + 1.0,
        (k, _) => 0.5 * (sorted[k - 1] + sorted[k]),
    };
    Ok(gamma.max(0.0))
}
