//! Gated block selection and the receding-horizon episode loop.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{run_chain, CapsConfig, ChainDiagnostics, System1Mode};
use crate::error::{CapsError, Result};
use crate::gating::{block_signals, gate, GateDecision, GateMode};
use crate::oracle::{enumerate_global_power_from, DEFAULT_ENUMERATION_CAP};
use crate::policy::{NodeId, PolicyModel, Trajectory};

/// How a block is chosen once the context is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "selector", rename_all = "snake_case")]
pub enum BlockSelector {
    /// Gate on the greedy block, then refine with MCMC.
    Caps(CapsConfig),
    /// Same gate; on search keep the most likely of the greedy block and
    /// `n_mcmc` base samples, for `n_mcmc + 1` evaluations.
    BestOfN(CapsConfig),
    /// Draw every block exactly from the block power distribution.
    ExactPower { alpha: f64, block_len: usize },
}

impl BlockSelector {
    pub fn block_len(&self) -> usize {
        match self {
            BlockSelector::Caps(c) | BlockSelector::BestOfN(c) => c.block_len,
            BlockSelector::ExactPower { block_len, .. } => *block_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            BlockSelector::Caps(c) | BlockSelector::BestOfN(c) => c.validate(),
            BlockSelector::ExactPower { alpha, block_len } => {
                if !(*alpha >= 1.0 && alpha.is_finite()) || *block_len == 0 {
                    Err(CapsError::InvalidParameter(
                        "exact power selection needs alpha >= 1 and block_len >= 1".into(),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSelection {
    pub block: Trajectory,
    pub decision: GateDecision,
    pub diagnostics: ChainDiagnostics,
}

/// Greedy warm start, gate, and (when the gate fires) an MCMC refinement of
/// the next block after `context`. `diagnostics.policy_calls` includes the
/// warm-start pass.
pub fn caps_select_block<R: Rng + ?Sized>(
    policy: &PolicyModel,
    context: NodeId,
    config: &CapsConfig,
    rng: &mut R,
) -> Result<BlockSelection> {
    select_block(
        policy,
        context,
        config.block_len,
        &BlockSelector::Caps(*config),
        rng,
    )
}

/// Selects a block of `len` steps (truncated at the horizon) after `context`.
pub fn select_block<R: Rng + ?Sized>(
    policy: &PolicyModel,
    context: NodeId,
    len: usize,
    selector: &BlockSelector,
    rng: &mut R,
) -> Result<BlockSelection> {
    let len = len.min(policy.remaining(context));
    if len == 0 {
        return Err(CapsError::HorizonExceeded {
            step: policy.depth(context),
            horizon: policy.horizon(),
        });
    }
    let config = match selector {
        BlockSelector::ExactPower { alpha, .. } => {
            let table =
                enumerate_global_power_from(policy, context, len, *alpha, DEFAULT_ENUMERATION_CAP)?;
            let actions = table.sample(rng).to_vec();
            return Ok(BlockSelection {
                block: policy.trajectory_from(context, &actions)?,
                decision: GateDecision {
                    mode: GateMode::System2,
                    signal_value: f64::NAN,
                    threshold_used: f64::NAN,
                },
                diagnostics: ChainDiagnostics {
                    policy_calls: 1,
                    ..ChainDiagnostics::default()
                },
            });
        }
        BlockSelector::Caps(c) | BlockSelector::BestOfN(c) => c,
    };

    let greedy = policy.greedy_from(context, len);
    let signals = block_signals(policy, context, &greedy.actions)?;
    let decision = gate(&signals, &config.gate, rng);
    if decision.mode == GateMode::System1 {
        let block = match config.system1 {
            System1Mode::Argmax => greedy,
            System1Mode::Sample => policy.sample_from(context, len, 1.0, rng).trajectory,
        };
        return Ok(BlockSelection {
            block,
            decision,
            diagnostics: ChainDiagnostics {
                policy_calls: 1,
                ..ChainDiagnostics::default()
            },
        });
    }

    let (block, mut diagnostics) = match selector {
        BlockSelector::BestOfN(_) => {
            let mut best = greedy;
            let mut best_lp = best.log_prob();
            for _ in 0..config.n_mcmc {
                let s = policy.sample_from(context, len, 1.0, rng).trajectory;
                let lp = s.log_prob();
                if lp > best_lp {
                    best = s;
                    best_lp = lp;
                }
            }
            let d = ChainDiagnostics {
                steps: config.n_mcmc,
                policy_calls: config.n_mcmc as u64,
                ..ChainDiagnostics::default()
            };
            (best, d)
        }
        _ => run_chain(policy, context, greedy, config, rng)?,
    };
    diagnostics.policy_calls += 1;
    Ok(BlockSelection {
        block,
        decision,
        diagnostics,
    })
}

/// `n` independent base-policy samples over the rest of the horizon from
/// `context`; returns the most likely one, the first drawn on ties.
pub fn best_of_n_baseline<R: Rng + ?Sized>(
    policy: &PolicyModel,
    context: NodeId,
    n: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    if n == 0 {
        return Err(CapsError::InvalidParameter("best-of-n needs n >= 1".into()));
    }
    let len = policy.remaining(context);
    let mut best = policy.sample_from(context, len, 1.0, rng).trajectory;
    let mut best_lp = best.log_prob();
    for _ in 1..n {
        let s = policy.sample_from(context, len, 1.0, rng).trajectory;
        let lp = s.log_prob();
        if lp > best_lp {
            best = s;
            best_lp = lp;
        }
    }
    Ok(best)
}

/// One committed block of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub block_index: usize,
    pub gate_mode: GateMode,
    pub accept_rate: Option<f64>,
    pub actions: Vec<usize>,
    /// Whether the episode has entered a failure state by the end of this block.
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub blocks: Vec<BlockRecord>,
    pub actions: Vec<usize>,
    pub failed: bool,
    /// Number of actions taken when the first failure state was entered.
    pub failure_step: Option<usize>,
    pub policy_calls: u64,
    pub system2_blocks: usize,
    pub accepted: usize,
    pub mcmc_steps: usize,
}

impl EpisodeTrace {
    /// One JSON object per block, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            out.push_str(&serde_json::to_string(b).expect("block records serialise"));
            out.push('\n');
        }
        out
    }
}

/// Commits blocks from the initial state until `episode_len` actions have
/// been taken. A final block that would cross `episode_len` is truncated.
/// The episode always runs to the end; failure is absorbing, so the trace
/// records when it was first entered.
pub fn run_receding_horizon<R: Rng + ?Sized>(
    policy: &PolicyModel,
    selector: &BlockSelector,
    episode_len: usize,
    rng: &mut R,
) -> Result<EpisodeTrace> {
    selector.validate()?;
    if episode_len > policy.horizon() {
        return Err(CapsError::HorizonExceeded {
            step: episode_len,
            horizon: policy.horizon(),
        });
    }
    let b = selector.block_len();
    let mut node = policy.root();
    let mut trace = EpisodeTrace {
        blocks: Vec::with_capacity(episode_len.div_ceil(b)),
        actions: Vec::with_capacity(episode_len),
        failed: policy.is_failed(node),
        failure_step: policy.is_failed(node).then_some(0),
        policy_calls: 0,
        system2_blocks: 0,
        accepted: 0,
        mcmc_steps: 0,
    };
    let mut block_index = 0;
    while trace.actions.len() < episode_len {
        let len = b.min(episode_len - trace.actions.len());
        let sel = select_block(policy, node, len, selector, rng)?;
        let path = policy.path(node, &sel.block.actions)?;
        if trace.failure_step.is_none() {
            if let Some(i) = path[1..].iter().position(|&n| policy.is_failed(n)) {
                trace.failure_step = Some(trace.actions.len() + i + 1);
                trace.failed = true;
            }
        }
        node = *path.last().expect("path contains the start state");
        trace.actions.extend_from_slice(&sel.block.actions);
        trace.policy_calls += sel.diagnostics.policy_calls;
        trace.accepted += sel.diagnostics.accepted;
        trace.mcmc_steps += sel.diagnostics.steps;
        if sel.decision.mode.is_search() {
            trace.system2_blocks += 1;
        }
        trace.blocks.push(BlockRecord {
            block_index,
            gate_mode: sel.decision.mode,
            accept_rate: sel.diagnostics.acceptance_rate,
            actions: sel.block.actions,
            failed: trace.failed,
        });
        block_index += 1;
    }
    Ok(trace)
}
