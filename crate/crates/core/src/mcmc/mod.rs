//! Block-level Metropolis-Hastings refinement towards `p(τ)^α`.
//!
//! A proposal keeps a uniformly drawn prefix of the current block and
//! regenerates the rest from the per-step distributions raised to
//! `proposal_exponent`. Forward and reverse proposal probabilities are
//! evaluated exactly on the tabular policy, so the chain targets the
//! block-conditional power distribution for any proposal exponent.

mod select;

pub use select::{
    best_of_n_baseline, caps_select_block, run_receding_horizon, select_block, BlockRecord,
    BlockSelection, BlockSelector, EpisodeTrace,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CapsError, Result};
use crate::gating::GateConfig;
use crate::oracle::{enumerate_global_power_from, enumerate_paths, DEFAULT_ENUMERATION_CAP};
use crate::policy::{NodeId, PolicyModel, Trajectory};

/// What System 1 executes when the gate does not fire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System1Mode {
    /// Per-step argmax block.
    #[default]
    Argmax,
    /// Ancestral sample from the base policy.
    Sample,
}

/// Sampler settings. Missing JSON fields take the [`Default`] values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapsConfig {
    /// Sharpening exponent α of the target `p(τ)^α`.
    pub alpha: f64,
    /// MCMC iterations per searched block.
    pub n_mcmc: usize,
    pub block_len: usize,
    /// β: exponent applied to step distributions when regenerating a suffix.
    pub proposal_exponent: f64,
    pub gate: GateConfig,
    pub seed: u64,
    pub system1: System1Mode,
}

impl Default for CapsConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            n_mcmc: 30,
            block_len: 4,
            proposal_exponent: 1.0,
            gate: GateConfig::default(),
            seed: 0,
            system1: System1Mode::Argmax,
        }
    }
}

impl CapsConfig {
    /// Every violated constraint, in field order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.alpha >= 1.0 && self.alpha.is_finite()) {
            v.push(format!("alpha must be ≥ 1, got {}", self.alpha));
        }
        if self.block_len == 0 {
            v.push("block_len must be >= 1".into());
        }
        if !(self.proposal_exponent > 0.0 && self.proposal_exponent.is_finite()) {
            v.push(format!(
                "proposal_exponent must be finite and > 0, got {}",
                self.proposal_exponent
            ));
        }
        if let Err(e) = self.gate.validate() {
            v.push(e.to_string());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations().into_iter().next() {
            None => Ok(()),
            Some(m) => Err(CapsError::InvalidParameter(m)),
        }
    }
}

/// A candidate block and the exact proposal probabilities in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalRecord {
    pub candidate: Trajectory,
    pub logq_forward: f64,
    pub logq_reverse: f64,
    /// Number of leading actions copied from the current block.
    pub split_point: usize,
}

/// Keeps `current[..split]` for a uniform split in `0..B` and regenerates the
/// remainder from `context`.
pub fn propose<R: Rng + ?Sized>(
    policy: &PolicyModel,
    context: NodeId,
    current: &Trajectory,
    proposal_exponent: f64,
    rng: &mut R,
) -> Result<ProposalRecord> {
    let b = current.len();
    if b == 0 {
        return Err(CapsError::InvalidParameter(
            "cannot propose from an empty block".into(),
        ));
    }
    let split = rng.random_range(0..b);
    propose_at(policy, context, current, split, proposal_exponent, rng)
}

fn propose_at<R: Rng + ?Sized>(
    policy: &PolicyModel,
    context: NodeId,
    current: &Trajectory,
    split: usize,
    proposal_exponent: f64,
    rng: &mut R,
) -> Result<ProposalRecord> {
    let b = current.len();
    let node = policy.walk(context, &current.actions[..split])?;
    let suffix = policy.sample_from(node, b - split, proposal_exponent, rng);
    let logq_reverse =
        policy.tempered_log_prob_from(node, &current.actions[split..], proposal_exponent)?;
    let mut candidate = Trajectory {
        actions: current.actions[..split].to_vec(),
        step_logps: current.step_logps[..split].to_vec(),
    };
    candidate
        .actions
        .extend_from_slice(&suffix.trajectory.actions);
    candidate
        .step_logps
        .extend_from_slice(&suffix.trajectory.step_logps);
    Ok(ProposalRecord {
        candidate,
        logq_forward: suffix.log_q,
        logq_reverse,
        split_point: split,
    })
}

/// `min(0, α(logp_new − logp_old) + logq_rev − logq_fwd)`.
///
/// A zero-probability candidate is rejected (`-inf`); a zero-probability
/// current state accepts any finite candidate. Both at zero is degenerate.
pub fn acceptance_log_ratio(
    logp_old: f64,
    logp_new: f64,
    logq_fwd: f64,
    logq_rev: f64,
    alpha: f64,
) -> Result<f64> {
    let ninf = f64::NEG_INFINITY;
    match (logp_old == ninf, logp_new == ninf) {
        (true, true) => Err(CapsError::DegenerateComparison),
        (_, true) => Ok(ninf),
        (true, false) => Ok(0.0),
        // Evaluation order matters: with α = 1 and an exact base-policy
        // proposal the two differences cancel to exactly zero.
        _ => Ok((alpha * (logp_new - logp_old) + (logq_rev - logq_fwd)).min(0.0)),
    }
}

/// Current position of a chain and its running counters.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub current: Trajectory,
    pub current_logp: f64,
    pub step_count: usize,
    pub accept_count: usize,
    /// Longest run of consecutive rejections seen so far.
    pub stagnation_run: usize,
    rejection_run: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub steps: usize,
    pub accepted: usize,
    /// `None` when no step was taken.
    pub acceptance_rate: Option<f64>,
    pub stagnation_run: usize,
    /// Block-level policy evaluations, including the warm-start pass when
    /// the chain is run through a block selector.
    pub policy_calls: u64,
}

/// A single Metropolis-Hastings chain over blocks that start at `context`.
#[derive(Debug, Clone)]
pub struct Chain<'a> {
    policy: &'a PolicyModel,
    context: NodeId,
    alpha: f64,
    proposal_exponent: f64,
    state: ChainState,
}

impl<'a> Chain<'a> {
    pub fn new(
        policy: &'a PolicyModel,
        context: NodeId,
        init: Trajectory,
        config: &CapsConfig,
    ) -> Result<Self> {
        config.validate()?;
        if init.is_empty() {
            return Err(CapsError::InvalidParameter(
                "chain needs a non-empty block".into(),
            ));
        }
        let current = policy.trajectory_from(context, &init.actions)?;
        let current_logp = current.log_prob();
        Ok(Self {
            policy,
            context,
            alpha: config.alpha,
            proposal_exponent: config.proposal_exponent,
            state: ChainState {
                current,
                current_logp,
                step_count: 0,
                accept_count: 0,
                stagnation_run: 0,
                rejection_run: 0,
            },
        })
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    pub fn current(&self) -> &Trajectory {
        &self.state.current
    }

    /// One propose/accept step. Returns whether the candidate was accepted.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<bool> {
        let rec = propose(
            self.policy,
            self.context,
            &self.state.current,
            self.proposal_exponent,
            rng,
        )?;
        let s = rec.split_point;
        // The shared prefix cancels; compare suffixes only.
        let lp_old = self.state.current.suffix_log_prob(s);
        let lp_new = rec.candidate.suffix_log_prob(s);
        let log_a = match acceptance_log_ratio(
            lp_old,
            lp_new,
            rec.logq_forward,
            rec.logq_reverse,
            self.alpha,
        ) {
            Ok(v) => v,
            Err(CapsError::DegenerateComparison) => f64::NEG_INFINITY,
            Err(e) => return Err(e),
        };
        let u: f64 = rng.random();
        let accept = u < log_a.exp();
        let st = &mut self.state;
        st.step_count += 1;
        if accept {
            st.accept_count += 1;
            st.current = rec.candidate;
            st.current_logp = st.current.log_prob();
            st.rejection_run = 0;
        } else {
            st.rejection_run += 1;
            st.stagnation_run = st.stagnation_run.max(st.rejection_run);
        }
        Ok(accept)
    }

    pub fn diagnostics(&self) -> ChainDiagnostics {
        let st = &self.state;
        ChainDiagnostics {
            steps: st.step_count,
            accepted: st.accept_count,
            acceptance_rate: (st.step_count > 0)
                .then(|| st.accept_count as f64 / st.step_count as f64),
            stagnation_run: st.stagnation_run,
            policy_calls: st.step_count as u64,
        }
    }

    pub fn into_current(self) -> Trajectory {
        self.state.current
    }
}

/// Runs `config.n_mcmc` steps from `init` and returns the final block.
/// Rejected proposals count towards the budget.
pub fn run_chain<R: Rng + ?Sized>(
    policy: &PolicyModel,
    context: NodeId,
    init: Trajectory,
    config: &CapsConfig,
    rng: &mut R,
) -> Result<(Trajectory, ChainDiagnostics)> {
    let mut chain = Chain::new(policy, context, init, config)?;
    for _ in 0..config.n_mcmc {
        chain.step(rng)?;
    }
    let diag = chain.diagnostics();
    Ok((chain.into_current(), diag))
}

/// Exact one-step transition matrix of the chain over all blocks of
/// length `len` from `context`, in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel {
    pub states: Vec<Vec<usize>>,
    /// `matrix[i][j] = T(states[j] | states[i])`.
    pub matrix: Vec<Vec<f64>>,
}

impl TransitionKernel {
    pub fn index_of(&self, actions: &[usize]) -> Option<usize> {
        self.states
            .binary_search_by(|s| s.as_slice().cmp(actions))
            .ok()
    }
}

pub fn transition_kernel(
    policy: &PolicyModel,
    context: NodeId,
    len: usize,
    alpha: f64,
    proposal_exponent: f64,
) -> Result<TransitionKernel> {
    let states = enumerate_paths(policy, context, len, DEFAULT_ENUMERATION_CAP)?;
    let len = states.first().map_or(0, |s| s.len());
    if len == 0 {
        return Err(CapsError::InvalidParameter(
            "kernel needs blocks of length >= 1".into(),
        ));
    }
    let n = states.len();
    let index = |a: &[usize]| states.binary_search_by(|s| s.as_slice().cmp(a)).ok();
    let mut matrix = vec![vec![0.0; n]; n];
    let split_prob = 1.0 / len as f64;
    for (i, from) in states.iter().enumerate() {
        let mut moved = 0.0;
        for split in 0..len {
            let node = policy.walk(context, &from[..split])?;
            let lp_old = policy.log_prob_from(node, &from[split..])?;
            let lq_rev = policy.tempered_log_prob_from(node, &from[split..], proposal_exponent)?;
            for suffix in enumerate_paths(policy, node, len - split, DEFAULT_ENUMERATION_CAP)? {
                let lq_fwd = policy.tempered_log_prob_from(node, &suffix, proposal_exponent)?;
                let lp_new = policy.log_prob_from(node, &suffix)?;
                let log_a = acceptance_log_ratio(lp_old, lp_new, lq_fwd, lq_rev, alpha)?;
                let mass = split_prob * lq_fwd.exp() * log_a.exp();
                let mut to = from[..split].to_vec();
                to.extend_from_slice(&suffix);
                let j = index(&to).expect("proposal stays in the enumerated space");
                if j != i {
                    matrix[i][j] += mass;
                    moved += mass;
                }
            }
        }
        matrix[i][i] = 1.0 - moved;
    }
    Ok(TransitionKernel { states, matrix })
}

/// Acceptance rate of the chain at stationarity: the probability that a
/// proposal drawn from a target-distributed state is accepted.
pub fn expected_acceptance_rate(
    policy: &PolicyModel,
    context: NodeId,
    len: usize,
    alpha: f64,
    proposal_exponent: f64,
) -> Result<f64> {
    let target = enumerate_global_power_from(policy, context, len, alpha, DEFAULT_ENUMERATION_CAP)?;
    let mut rate = 0.0;
    for (from, pi) in target.iter() {
        let b = from.len();
        for split in 0..b {
            let node = policy.walk(context, &from[..split])?;
            let lp_old = policy.log_prob_from(node, &from[split..])?;
            let lq_rev = policy.tempered_log_prob_from(node, &from[split..], proposal_exponent)?;
            for suffix in enumerate_paths(policy, node, b - split, DEFAULT_ENUMERATION_CAP)? {
                let lq_fwd = policy.tempered_log_prob_from(node, &suffix, proposal_exponent)?;
                let lp_new = policy.log_prob_from(node, &suffix)?;
                let log_a = acceptance_log_ratio(lp_old, lp_new, lq_fwd, lq_rev, alpha)?;
                rate += pi * lq_fwd.exp() * log_a.exp() / b as f64;
            }
        }
    }
    Ok(rate)
}
