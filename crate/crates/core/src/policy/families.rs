//! Synthetic policy families.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{NodeId, PolicyBuilder, PolicyModel};
use crate::error::{CapsError, Result};

/// Largest number of states a fully branching random policy may allocate.
const MAX_RANDOM_STATES: usize = 1_000_000;

/// Uniform distribution at every step. One state per time index.
pub fn make_uniform_policy(action_count: usize, horizon: usize) -> Result<PolicyModel> {
    let mut b = PolicyBuilder::new(action_count, horizon)?;
    let uniform = vec![1.0 / action_count as f64; action_count];
    let mut next = b.add_terminal(false);
    for depth in (0..horizon).rev() {
        let id = b.add_state(depth, uniform.clone(), false);
        for a in 0..action_count {
            b.connect(id, a, next);
        }
        next = id;
    }
    b.build(next)
}

/// Policy that plays `actions` with probability one.
pub fn make_deterministic_policy(action_count: usize, actions: &[usize]) -> Result<PolicyModel> {
    let mut b = PolicyBuilder::new(action_count, actions.len())?;
    let mut next = b.add_terminal(false);
    for (depth, &a) in actions.iter().enumerate().rev() {
        if a >= action_count {
            return Err(CapsError::ActionOutOfRange {
                action: a,
                size: action_count,
            });
        }
        let id = b.add_state(depth, b.one_hot(a), false);
        b.connect(id, a, next);
        next = id;
    }
    b.build(next)
}

/// Single decision point between a concentrated good branch and a dispersed
/// bad branch.
///
/// Action layout at the first step: [`GOOD`](Self::GOOD) with mass `eps_good`,
/// [`BAD`](Self::BAD) with mass `eps_bad`, [`NEUTRAL`](Self::NEUTRAL) with the
/// remaining mass. After `BAD` the next step is uniform over `branch_count`
/// continuations; every other step is deterministic (action 0). The horizon is
/// `1 + tail_horizon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PivotalWindowSpec {
    pub eps_good: f64,
    pub eps_bad: f64,
    pub branch_count: usize,
    pub tail_horizon: usize,
}

impl PivotalWindowSpec {
    pub const GOOD: usize = 0;
    pub const BAD: usize = 1;
    pub const NEUTRAL: usize = 2;

    pub fn new(eps_good: f64, eps_bad: f64, branch_count: usize, tail_horizon: usize) -> Self {
        Self {
            eps_good,
            eps_bad,
            branch_count,
            tail_horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CapsError::InvalidPivotalSpec(m));
        if !(self.eps_good > 0.0 && self.eps_good < self.eps_bad && self.eps_bad < 1.0) {
            return err(format!(
                "need 0 < eps_good < eps_bad < 1, got {} and {}",
                self.eps_good, self.eps_bad
            ));
        }
        if self.eps_good + self.eps_bad > 1.0 + 1e-12 {
            return err("eps_good + eps_bad exceeds 1".into());
        }
        if self.branch_count == 0 {
            return err("branch_count must be positive".into());
        }
        if self.tail_horizon == 0 {
            return err("tail_horizon must be positive".into());
        }
        Ok(())
    }

    pub fn action_count(&self) -> usize {
        self.branch_count.max(3)
    }
}

pub fn make_pivotal_window_policy(spec: &PivotalWindowSpec) -> Result<PolicyModel> {
    spec.validate()?;
    let n_actions = spec.action_count();
    let horizon = 1 + spec.tail_horizon;
    let mut b = PolicyBuilder::new(n_actions, horizon)?;

    // Deterministic chain covering depths `from..horizon`, returning its head.
    let chain = |b: &mut PolicyBuilder, from: usize, failed: bool| -> NodeId {
        let mut next = b.add_terminal(failed);
        for depth in (from..horizon).rev() {
            let id = b.add_state(depth, b.one_hot(0), failed);
            b.connect(id, 0, next);
            next = id;
        }
        next
    };

    let good = chain(&mut b, 1, false);
    let neutral_mass = (1.0 - spec.eps_good - spec.eps_bad).max(0.0);
    let neutral = (neutral_mass > 0.0).then(|| chain(&mut b, 1, false));

    // Bad branch: uniform fan-out at depth 1, then a shared deterministic tail.
    let fan_tail = chain(&mut b, 2, true);
    let mut fan_probs = vec![0.0; n_actions];
    for p in fan_probs.iter_mut().take(spec.branch_count) {
        *p = 1.0 / spec.branch_count as f64;
    }
    let fan = b.add_state(1, fan_probs, true);
    for a in 0..spec.branch_count {
        b.connect(fan, a, fan_tail);
    }

    let mut root_probs = vec![0.0; n_actions];
    root_probs[PivotalWindowSpec::GOOD] = spec.eps_good;
    root_probs[PivotalWindowSpec::BAD] = spec.eps_bad;
    root_probs[PivotalWindowSpec::NEUTRAL] = neutral_mass;
    let root = b.add_state(0, root_probs, false);
    b.connect(root, PivotalWindowSpec::GOOD, good);
    b.connect(root, PivotalWindowSpec::BAD, fan);
    if let Some(n) = neutral {
        b.connect(root, PivotalWindowSpec::NEUTRAL, n);
    }
    b.build(root)
}

/// Chain with drift opportunities at `pivot_positions` (1-based time steps).
/// At a pivot, action [`ON_TASK`](Self::ON_TASK) has mass `1 - eps` and
/// [`DRIFT`](Self::DRIFT) has mass `eps` and enters an absorbing failure
/// state. Every other step is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftChainSpec {
    pub eps: f64,
    pub pivot_positions: Vec<usize>,
    pub horizon: usize,
    #[serde(default = "default_drift_actions")]
    pub action_count: usize,
}

fn default_drift_actions() -> usize {
    2
}

impl DriftChainSpec {
    pub const ON_TASK: usize = 0;
    pub const DRIFT: usize = 1;

    /// Drift chain with a pivot at every step.
    pub fn every_step(eps: f64, horizon: usize) -> Self {
        Self {
            eps,
            pivot_positions: (1..=horizon).collect(),
            horizon,
            action_count: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CapsError::InvalidDriftSpec(m));
        if !(0.0..1.0).contains(&self.eps) {
            return err(format!("eps must lie in [0, 1), got {}", self.eps));
        }
        if self.horizon == 0 {
            return err("horizon must be positive".into());
        }
        if self.action_count < 2 {
            return err("action_count must be at least 2".into());
        }
        if let Some(p) = self
            .pivot_positions
            .iter()
            .find(|&&p| p == 0 || p > self.horizon)
        {
            return err(format!("pivot position {p} outside [1, {}]", self.horizon));
        }
        Ok(())
    }

    pub fn is_pivot(&self, step: usize) -> bool {
        self.pivot_positions.contains(&(step + 1))
    }
}

pub fn make_drift_chain_policy(spec: &DriftChainSpec) -> Result<PolicyModel> {
    spec.validate()?;
    let horizon = spec.horizon;
    let mut b = PolicyBuilder::new(spec.action_count, horizon)?;
    let mut next_ok = b.add_terminal(false);
    let mut next_fail = b.add_terminal(true);
    for depth in (0..horizon).rev() {
        let fail = b.add_state(depth, b.one_hot(DriftChainSpec::ON_TASK), true);
        b.connect(fail, DriftChainSpec::ON_TASK, next_fail);
        let ok = if spec.is_pivot(depth) && spec.eps > 0.0 {
            let mut probs = vec![0.0; spec.action_count];
            probs[DriftChainSpec::ON_TASK] = 1.0 - spec.eps;
            probs[DriftChainSpec::DRIFT] = spec.eps;
            let id = b.add_state(depth, probs, false);
            b.connect(id, DriftChainSpec::DRIFT, next_fail);
            id
        } else {
            b.add_state(depth, b.one_hot(DriftChainSpec::ON_TASK), false)
        };
        b.connect(ok, DriftChainSpec::ON_TASK, next_ok);
        next_ok = ok;
        next_fail = fail;
    }
    b.build(next_ok)
}

/// Fully branching policy whose step distributions are softmaxes of
/// Gaussian logits, one independent draw per prefix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomPolicySpec {
    pub action_count: usize,
    pub horizon: usize,
    /// Standard deviation of the logits. Larger values give peakier steps.
    pub logit_scale: f64,
    pub seed: u64,
}

impl RandomPolicySpec {
    pub fn new(action_count: usize, horizon: usize, logit_scale: f64, seed: u64) -> Self {
        Self {
            action_count,
            horizon,
            logit_scale,
            seed,
        }
    }
}

pub fn make_random_policy(spec: &RandomPolicySpec) -> Result<PolicyModel> {
    if !(spec.logit_scale >= 0.0 && spec.logit_scale.is_finite()) {
        return Err(CapsError::InvalidPolicy(
            "logit_scale must be finite and >= 0".into(),
        ));
    }
    let states = (0..=spec.horizon as u32)
        .try_fold(0usize, |acc, d| {
            spec.action_count
                .checked_pow(d)
                .and_then(|n| acc.checked_add(n))
        })
        .filter(|&n| n <= MAX_RANDOM_STATES)
        .ok_or_else(|| CapsError::InvalidPolicy("random policy too large to tabulate".into()))?;
    let mut b = PolicyBuilder::new(spec.action_count, spec.horizon)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.logit_scale.max(f64::MIN_POSITIVE))
        .map_err(|e| CapsError::InvalidPolicy(e.to_string()))?;

    // Breadth-first allocation so sibling draws are generated in prefix order.
    let mut layer: Vec<NodeId> = Vec::with_capacity(states);
    let root = b.add_state(0, random_row(&normal, spec, &mut rng), false);
    layer.push(root);
    for depth in 1..=spec.horizon {
        let mut next_layer = Vec::with_capacity(layer.len() * spec.action_count);
        for &parent in &layer {
            for a in 0..spec.action_count {
                let child = if depth == spec.horizon {
                    b.add_terminal(false)
                } else {
                    b.add_state(depth, random_row(&normal, spec, &mut rng), false)
                };
                b.connect(parent, a, child);
                next_layer.push(child);
            }
        }
        layer = next_layer;
    }
    b.build(root)
}

fn random_row(normal: &Normal<f64>, spec: &RandomPolicySpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let logits: Vec<f64> = (0..spec.action_count)
        .map(|_| {
            if spec.logit_scale == 0.0 {
                0.0
            } else {
                normal.sample(rng)
            }
        })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| w / total).collect()
}

/// Episode of `blocks` action blocks of length `block_len`, a subset of which
/// are negative pivotal windows.
///
/// Ordinary steps are benign: every action keeps the task on track and the
/// distribution is `1 - (|A|-1)·noise` on action 0 with `noise` on the rest.
/// A pivotal block opens with [`GOOD`](Self::GOOD) at mass `good_prob` and
/// [`BAD`](Self::BAD) at `1 - good_prob`. The good action is followed by a
/// deterministic completion of the block. The bad action is followed by
/// uniform steps for the rest of the block and moves the episode into a
/// failed copy of the environment with identical distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedEnvSpec {
    #[serde(default = "default_mixed_actions")]
    pub action_count: usize,
    pub block_len: usize,
    pub blocks: usize,
    /// Zero-based indices of pivotal blocks.
    pub pivotal_blocks: Vec<usize>,
    #[serde(default = "default_good_prob")]
    pub good_prob: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_mixed_actions() -> usize {
    4
}
fn default_good_prob() -> f64 {
    0.4
}
fn default_noise() -> f64 {
    0.05
}

impl MixedEnvSpec {
    pub const GOOD: usize = 0;
    pub const BAD: usize = 1;

    /// Places `round(fraction · blocks)` pivotal blocks at positions drawn
    /// from `layout_seed`.
    pub fn with_fraction(block_len: usize, blocks: usize, fraction: f64, layout_seed: u64) -> Self {
        let count = ((fraction * blocks as f64).round() as usize).min(blocks);
        let mut indices: Vec<usize> = (0..blocks).collect();
        indices.shuffle(&mut ChaCha8Rng::seed_from_u64(layout_seed));
        let mut pivotal: Vec<usize> = indices.into_iter().take(count).collect();
        pivotal.sort_unstable();
        Self {
            action_count: default_mixed_actions(),
            block_len,
            blocks,
            pivotal_blocks: pivotal,
            good_prob: default_good_prob(),
            noise: default_noise(),
        }
    }

    pub fn horizon(&self) -> usize {
        self.block_len * self.blocks
    }

    pub fn pivotal_fraction(&self) -> f64 {
        self.pivotal_blocks.len() as f64 / self.blocks as f64
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(CapsError::InvalidPolicy(m));
        if self.action_count < 2 {
            return err("action_count must be at least 2".into());
        }
        if self.block_len < 2 || self.blocks == 0 {
            return err("need block_len >= 2 and blocks >= 1".into());
        }
        if !(self.good_prob > 0.0 && self.good_prob < 0.5) {
            return err(
                "good_prob must lie in (0, 0.5) so the bad action is the local argmax".into(),
            );
        }
        let max_noise = 1.0 / self.action_count as f64;
        if !(self.noise >= 0.0 && self.noise < max_noise) {
            return err(format!("noise must lie in [0, {max_noise})"));
        }
        if let Some(b) = self.pivotal_blocks.iter().find(|&&b| b >= self.blocks) {
            return err(format!("pivotal block {b} out of range"));
        }
        Ok(())
    }
}

pub fn make_mixed_env_policy(spec: &MixedEnvSpec) -> Result<PolicyModel> {
    spec.validate()?;
    let n = spec.action_count;
    let bl = spec.block_len;
    let mut b = PolicyBuilder::new(n, spec.horizon())?;
    let mut noisy = vec![spec.noise; n];
    noisy[0] = 1.0 - spec.noise * (n - 1) as f64;
    let uniform = vec![1.0 / n as f64; n];

    // entry[layer] = first state of the block after the one being built.
    let mut entry = [b.add_terminal(false), b.add_terminal(true)];
    for block in (0..spec.blocks).rev() {
        let start = block * bl;
        let pivotal = spec.pivotal_blocks.contains(&block);
        let mut new_entry = entry;
        if pivotal {
            // Dispersed continuation always lands in the failed layer.
            let mut disperse = entry[1];
            for depth in (start + 1..start + bl).rev() {
                let id = b.add_state(depth, uniform.clone(), true);
                for a in 0..n {
                    b.connect(id, a, disperse);
                }
                disperse = id;
            }
            for layer in 0..2 {
                let failed = layer == 1;
                let mut good = entry[layer];
                for depth in (start + 1..start + bl).rev() {
                    let id = b.add_state(depth, b.one_hot(0), failed);
                    b.connect(id, 0, good);
                    good = id;
                }
                let mut probs = vec![0.0; n];
                probs[MixedEnvSpec::GOOD] = spec.good_prob;
                probs[MixedEnvSpec::BAD] = 1.0 - spec.good_prob;
                let head = b.add_state(start, probs, failed);
                b.connect(head, MixedEnvSpec::GOOD, good);
                b.connect(head, MixedEnvSpec::BAD, disperse);
                new_entry[layer] = head;
            }
        } else {
            for layer in 0..2 {
                let mut next = entry[layer];
                for depth in (start..start + bl).rev() {
                    let id = b.add_state(depth, noisy.clone(), layer == 1);
                    for a in 0..n {
                        b.connect(id, a, next);
                    }
                    next = id;
                }
                new_entry[layer] = next;
            }
        }
        entry = new_entry;
    }
    b.build(entry[0])
}
