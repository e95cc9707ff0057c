//! Tabular autoregressive policies.
//!
//! A [`PolicyModel`] assigns a categorical action distribution to every
//! reachable action prefix. Prefixes are resolved through a layered state
//! graph: each state sits at a fixed depth (time index) and has at most one
//! successor per action. Distinct prefixes may share a successor state, so
//! a plain trie and a compact finite-state environment use the same
//! representation. Every query is still keyed by the action prefix.
//!
//! Probabilities are combined in natural-log space. A zero-probability
//! action has no successor and evaluates to `-inf`; it is never floored.

mod families;
mod spec;

pub use families::{
    make_deterministic_policy, make_drift_chain_policy, make_mixed_env_policy,
    make_pivotal_window_policy, make_random_policy, make_uniform_policy, DriftChainSpec,
    MixedEnvSpec, PivotalWindowSpec, RandomPolicySpec,
};
pub use spec::{ExplicitStep, PolicySpec};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CapsError, Result};
use crate::logspace::{argmax, ln_prob, ordered_sum, tempered_log_probs};

/// Index of a state inside a [`PolicyModel`].
pub type NodeId = usize;

/// Tolerance on the total mass of every stored step distribution.
pub const NORMALIZATION_TOL: f64 = 1e-12;

/// Finite discrete action set `{0, .., size-1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    size: usize,
}

impl ActionSpace {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(CapsError::InvalidActionSpace(size));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn check(&self, action: usize) -> Result<()> {
        if action < self.size {
            Ok(())
        } else {
            Err(CapsError::ActionOutOfRange {
                action,
                size: self.size,
            })
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    depth: usize,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    next: Vec<Option<NodeId>>,
    failed: bool,
}

/// Sequence of actions with the base-policy log-probability of each step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub actions: Vec<usize>,
    pub step_logps: Vec<f64>,
}

impl Trajectory {
    pub fn empty() -> Self {
        Self {
            actions: Vec::new(),
            step_logps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Sum of the cached step log-probabilities.
    pub fn log_prob(&self) -> f64 {
        ordered_sum(&self.step_logps)
    }

    /// Log-probability of the steps from `start` onward.
    pub fn suffix_log_prob(&self, start: usize) -> f64 {
        ordered_sum(&self.step_logps[start..])
    }
}

/// A trajectory drawn from (possibly tempered) per-step distributions,
/// together with the log-probability of having drawn it.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledTrajectory {
    /// Actions with step log-probabilities under the base policy.
    pub trajectory: Trajectory,
    /// Log-probability under the tempered per-step distributions.
    pub log_q: f64,
}

/// Immutable tabular policy over a fixed horizon.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    action_space: ActionSpace,
    horizon: usize,
    root: NodeId,
    nodes: Vec<Node>,
}

impl PolicyModel {
    pub fn action_space(&self) -> ActionSpace {
        self.action_space
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Time index of a state (number of actions taken to reach it).
    pub fn depth(&self, node: NodeId) -> usize {
        self.nodes[node].depth
    }

    /// Step distribution at a state. Empty at terminal states.
    pub fn dist(&self, node: NodeId) -> &[f64] {
        &self.nodes[node].probs
    }

    /// Natural-log step distribution at a state.
    pub fn log_dist(&self, node: NodeId) -> &[f64] {
        &self.nodes[node].log_probs
    }

    /// Whether the state is an (absorbing) failure state.
    pub fn is_failed(&self, node: NodeId) -> bool {
        self.nodes[node].failed
    }

    /// Successor after taking `action`, or `None` when the action has zero
    /// probability. Panics if `action` is outside the action space.
    pub fn next(&self, node: NodeId, action: usize) -> Option<NodeId> {
        self.nodes[node].next[action]
    }

    /// Follows `actions` from `start`.
    pub fn walk(&self, start: NodeId, actions: &[usize]) -> Result<NodeId> {
        let mut node = start;
        for (i, &a) in actions.iter().enumerate() {
            let depth = self.nodes[node].depth;
            if depth >= self.horizon {
                return Err(CapsError::HorizonExceeded {
                    step: depth,
                    horizon: self.horizon,
                });
            }
            self.action_space.check(a)?;
            node = self.nodes[node].next[a]
                .ok_or_else(|| CapsError::UnreachablePrefix(actions[..=i].to_vec()))?;
        }
        Ok(node)
    }

    /// State reached by an action prefix from the initial state.
    pub fn locate(&self, prefix: &[usize]) -> Result<NodeId> {
        self.walk(self.root, prefix)
    }

    /// Exact categorical distribution at time `t` after `prefix`.
    pub fn step_distribution(&self, prefix: &[usize], t: usize) -> Result<&[f64]> {
        if t >= self.horizon {
            return Err(CapsError::HorizonExceeded {
                step: t,
                horizon: self.horizon,
            });
        }
        if prefix.len() != t {
            return Err(CapsError::InvalidParameter(format!(
                "prefix length {} does not match time index {t}",
                prefix.len()
            )));
        }
        let node = self.locate(prefix)?;
        Ok(self.dist(node))
    }

    /// `Σ_t ln p(a_t | a_<t)`; `-inf` when any step has zero probability.
    pub fn trajectory_log_prob(&self, traj: &Trajectory) -> Result<f64> {
        self.log_prob_from(self.root, &traj.actions)
    }

    /// Log-probability of `actions` starting at state `start`.
    pub fn log_prob_from(&self, start: NodeId, actions: &[usize]) -> Result<f64> {
        let mut node = start;
        let mut total = 0.0;
        for &a in actions {
            let n = &self.nodes[node];
            if n.depth >= self.horizon {
                return Err(CapsError::HorizonExceeded {
                    step: n.depth,
                    horizon: self.horizon,
                });
            }
            self.action_space.check(a)?;
            let lp = n.log_probs[a];
            if lp == f64::NEG_INFINITY {
                return Ok(f64::NEG_INFINITY);
            }
            total += lp;
            node = n.next[a].expect("positive-probability action has a successor");
        }
        Ok(total)
    }

    /// Scores a reachable action sequence, caching per-step log-probabilities.
    pub fn trajectory_from(&self, start: NodeId, actions: &[usize]) -> Result<Trajectory> {
        let mut node = start;
        let mut step_logps = Vec::with_capacity(actions.len());
        for (i, &a) in actions.iter().enumerate() {
            let n = &self.nodes[node];
            if n.depth >= self.horizon {
                return Err(CapsError::HorizonExceeded {
                    step: n.depth,
                    horizon: self.horizon,
                });
            }
            self.action_space.check(a)?;
            node = n.next[a].ok_or_else(|| CapsError::UnreachablePrefix(actions[..=i].to_vec()))?;
            step_logps.push(n.log_probs[a]);
        }
        Ok(Trajectory {
            actions: actions.to_vec(),
            step_logps,
        })
    }

    /// States visited along `actions` from `start`, including both ends.
    pub fn path(&self, start: NodeId, actions: &[usize]) -> Result<Vec<NodeId>> {
        let mut nodes = Vec::with_capacity(actions.len() + 1);
        nodes.push(start);
        let mut node = start;
        for (i, &a) in actions.iter().enumerate() {
            self.action_space.check(a)?;
            if self.nodes[node].depth >= self.horizon {
                return Err(CapsError::HorizonExceeded {
                    step: self.nodes[node].depth,
                    horizon: self.horizon,
                });
            }
            node = self.nodes[node].next[a]
                .ok_or_else(|| CapsError::UnreachablePrefix(actions[..=i].to_vec()))?;
            nodes.push(node);
        }
        Ok(nodes)
    }

    /// Steps remaining before the horizon at a state.
    pub fn remaining(&self, node: NodeId) -> usize {
        self.horizon - self.nodes[node].depth
    }

    /// Per-step argmax path of length `len` from `start` (lowest index on ties).
    pub fn greedy_from(&self, start: NodeId, len: usize) -> Trajectory {
        let len = len.min(self.remaining(start));
        let mut node = start;
        let mut traj = Trajectory {
            actions: Vec::with_capacity(len),
            step_logps: Vec::with_capacity(len),
        };
        for _ in 0..len {
            let n = &self.nodes[node];
            let a = argmax(&n.probs);
            traj.actions.push(a);
            traj.step_logps.push(n.log_probs[a]);
            node = n.next[a].expect("argmax action has positive probability");
        }
        traj
    }

    /// Ancestral sample of `len` steps from `start`, each step drawn from the
    /// step distribution raised to `exponent` and renormalised.
    pub fn sample_from<R: Rng + ?Sized>(
        &self,
        start: NodeId,
        len: usize,
        exponent: f64,
        rng: &mut R,
    ) -> SampledTrajectory {
        let len = len.min(self.remaining(start));
        let mut node = start;
        let mut traj = Trajectory {
            actions: Vec::with_capacity(len),
            step_logps: Vec::with_capacity(len),
        };
        let mut q_steps = Vec::with_capacity(len);
        for _ in 0..len {
            let n = &self.nodes[node];
            let (a, lq) = if exponent == 1.0 {
                let a = sample_categorical(&n.probs, rng);
                (a, n.log_probs[a])
            } else {
                let tempered = tempered_log_probs(&n.log_probs, exponent);
                let probs: Vec<f64> = tempered.iter().map(|v| v.exp()).collect();
                let a = sample_categorical(&probs, rng);
                (a, tempered[a])
            };
            traj.actions.push(a);
            traj.step_logps.push(n.log_probs[a]);
            q_steps.push(lq);
            node = n.next[a].expect("sampled action has positive probability");
        }
        SampledTrajectory {
            trajectory: traj,
            log_q: ordered_sum(&q_steps),
        }
    }

    /// Log-probability that tempered ancestral sampling from `start`
    /// generates exactly `actions`.
    pub fn tempered_log_prob_from(
        &self,
        start: NodeId,
        actions: &[usize],
        exponent: f64,
    ) -> Result<f64> {
        if exponent == 1.0 {
            return self.log_prob_from(start, actions);
        }
        let mut node = start;
        let mut steps = Vec::with_capacity(actions.len());
        for &a in actions {
            self.action_space.check(a)?;
            let n = &self.nodes[node];
            let lq = tempered_log_probs(&n.log_probs, exponent)[a];
            if lq == f64::NEG_INFINITY {
                return Ok(f64::NEG_INFINITY);
            }
            steps.push(lq);
            node = n.next[a].expect("positive-probability action has a successor");
        }
        Ok(ordered_sum(&steps))
    }

    /// Whether any state visited along `actions` from `start` is a failure state.
    pub fn fails_along(&self, start: NodeId, actions: &[usize]) -> Result<bool> {
        Ok(self
            .path(start, actions)?
            .iter()
            .any(|&n| self.nodes[n].failed))
    }
}

/// Full-horizon tempered ancestral sample from the initial state. Step
/// log-probabilities are cached under the base policy; `log_q` is the
/// probability of the draw under the tempered distributions.
pub fn sample_trajectory<R: Rng + ?Sized>(
    policy: &PolicyModel,
    exponent: f64,
    rng: &mut R,
) -> Result<SampledTrajectory> {
    if !(exponent > 0.0) {
        return Err(CapsError::InvalidParameter(format!(
            "sampling exponent must be positive, got {exponent}"
        )));
    }
    Ok(policy.sample_from(policy.root(), policy.horizon(), exponent, rng))
}

/// Inverse-CDF draw. Falls back to the last positive entry when rounding
/// leaves the cumulative mass just below the uniform draw.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if u < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Incremental constructor for [`PolicyModel`].
#[derive(Debug, Clone)]
pub struct PolicyBuilder {
    action_space: ActionSpace,
    horizon: usize,
    nodes: Vec<Node>,
}

impl PolicyBuilder {
    pub fn new(action_count: usize, horizon: usize) -> Result<Self> {
        let action_space = ActionSpace::new(action_count)?;
        if horizon == 0 {
            return Err(CapsError::InvalidPolicy(
                "horizon must be at least 1".into(),
            ));
        }
        Ok(Self {
            action_space,
            horizon,
            nodes: Vec::new(),
        })
    }

    /// Adds a decision state at `depth < horizon`.
    pub fn add_state(&mut self, depth: usize, probs: Vec<f64>, failed: bool) -> NodeId {
        let log_probs = probs.iter().map(|&p| ln_prob(p)).collect();
        self.nodes.push(Node {
            depth,
            probs,
            log_probs,
            next: vec![None; self.action_space.size()],
            failed,
        });
        self.nodes.len() - 1
    }

    /// Adds a terminal state at the horizon.
    pub fn add_terminal(&mut self, failed: bool) -> NodeId {
        self.nodes.push(Node {
            depth: self.horizon,
            probs: Vec::new(),
            log_probs: Vec::new(),
            next: vec![None; self.action_space.size()],
            failed,
        });
        self.nodes.len() - 1
    }

    pub fn connect(&mut self, from: NodeId, action: usize, to: NodeId) {
        self.nodes[from].next[action] = Some(to);
    }

    /// One-hot distribution on `action`.
    pub fn one_hot(&self, action: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.action_space.size()];
        v[action] = 1.0;
        v
    }

    pub fn build(self, root: NodeId) -> Result<PolicyModel> {
        let size = self.action_space.size();
        let node_count = self.nodes.len();
        if root >= node_count || self.nodes[root].depth != 0 {
            return Err(CapsError::InvalidPolicy(
                "root must be a depth-0 state".into(),
            ));
        }
        for (id, n) in self.nodes.iter().enumerate() {
            if n.depth > self.horizon {
                return Err(CapsError::InvalidPolicy(format!(
                    "state {id} beyond horizon"
                )));
            }
            if n.depth == self.horizon {
                continue;
            }
            if n.probs.len() != size {
                return Err(CapsError::InvalidPolicy(format!(
                    "state {id}: distribution has {} entries, expected {size}",
                    n.probs.len()
                )));
            }
            if n.probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(CapsError::InvalidPolicy(format!(
                    "state {id}: negative or non-finite probability"
                )));
            }
            let total: f64 = n.probs.iter().sum();
            if (total - 1.0).abs() > NORMALIZATION_TOL {
                return Err(CapsError::NotADistribution(total));
            }
            for a in 0..size {
                match (n.probs[a] > 0.0, n.next[a]) {
                    (true, None) => {
                        return Err(CapsError::InvalidPolicy(format!(
                            "state {id}: action {a} has mass but no successor"
                        )))
                    }
                    (true, Some(s)) if s >= node_count || self.nodes[s].depth != n.depth + 1 => {
                        return Err(CapsError::InvalidPolicy(format!(
                            "state {id}: successor of action {a} is not at depth {}",
                            n.depth + 1
                        )))
                    }
                    _ => {}
                }
            }
        }
        let mut nodes = self.nodes;
        // Zero-mass actions never have successors.
        for n in nodes.iter_mut() {
            for a in 0..size {
                if n.depth < self.horizon && n.probs[a] == 0.0 {
                    n.next[a] = None;
                }
            }
        }
        Ok(PolicyModel {
            action_space: self.action_space,
            horizon: self.horizon,
            root,
            nodes,
        })
    }
}
