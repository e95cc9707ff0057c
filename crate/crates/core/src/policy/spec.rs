//! JSON policy descriptions.
//!
//! ```json
//! {"kind": "pivotal", "eps_good": 0.1, "eps_bad": 0.2, "branch_count": 10, "tail_horizon": 1}
//! {"kind": "drift", "eps": 0.1, "pivot_positions": [1, 2, 3], "horizon": 3}
//! {"kind": "random", "action_count": 4, "horizon": 4, "logit_scale": 1.5, "seed": 7}
//! {"kind": "uniform", "action_count": 4, "horizon": 3}
//! {"kind": "mixed", "block_len": 4, "blocks": 10, "pivotal_blocks": [2, 7]}
//! {"kind": "explicit", "action_count": 2, "horizon": 2,
//!  "steps": [{"prefix": [], "probs": [0.5, 0.5]}, ...],
//!  "failure_prefixes": [[1]]}
//! ```
//!
//! All probabilities are plain (not log) values. Pivot positions in a drift
//! spec are 1-based time steps; action prefixes are 0-based action indices.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::families::*;
use super::{PolicyBuilder, PolicyModel};
use crate::error::{CapsError, Result};

/// One row of an explicit step table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplicitStep {
    pub prefix: Vec<usize>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Pivotal(PivotalWindowSpec),
    Drift(DriftChainSpec),
    Random(RandomPolicySpec),
    Uniform {
        action_count: usize,
        horizon: usize,
    },
    Mixed(MixedEnvSpec),
    Explicit {
        action_count: usize,
        horizon: usize,
        steps: Vec<ExplicitStep>,
        #[serde(default)]
        failure_prefixes: Vec<Vec<usize>>,
    },
}

impl PolicySpec {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn build(&self) -> Result<PolicyModel> {
        match self {
            PolicySpec::Pivotal(s) => make_pivotal_window_policy(s),
            PolicySpec::Drift(s) => make_drift_chain_policy(s),
            PolicySpec::Random(s) => make_random_policy(s),
            PolicySpec::Uniform {
                action_count,
                horizon,
            } => make_uniform_policy(*action_count, *horizon),
            PolicySpec::Mixed(s) => make_mixed_env_policy(s),
            PolicySpec::Explicit {
                action_count,
                horizon,
                steps,
                failure_prefixes,
            } => build_explicit(*action_count, *horizon, steps, failure_prefixes),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            PolicySpec::Pivotal(_) => "pivotal",
            PolicySpec::Drift(_) => "drift",
            PolicySpec::Random(_) => "random",
            PolicySpec::Uniform { .. } => "uniform",
            PolicySpec::Mixed(_) => "mixed",
            PolicySpec::Explicit { .. } => "explicit",
        }
    }
}

fn build_explicit(
    action_count: usize,
    horizon: usize,
    steps: &[ExplicitStep],
    failure_prefixes: &[Vec<usize>],
) -> Result<PolicyModel> {
    let mut table: BTreeMap<&[usize], &[f64]> = BTreeMap::new();
    for s in steps {
        if s.prefix.len() >= horizon {
            return Err(CapsError::InvalidPolicy(format!(
                "prefix {:?} is not shorter than the horizon",
                s.prefix
            )));
        }
        if table.insert(&s.prefix, &s.probs).is_some() {
            return Err(CapsError::InvalidPolicy(format!(
                "duplicate prefix {:?}",
                s.prefix
            )));
        }
    }
    let failed = |prefix: &[usize]| failure_prefixes.iter().any(|f| prefix.starts_with(f));

    let mut b = PolicyBuilder::new(action_count, horizon)?;
    let lookup = |prefix: &[usize]| -> Result<Vec<f64>> {
        table.get(prefix).map(|p| p.to_vec()).ok_or_else(|| {
            CapsError::InvalidPolicy(format!("missing step table entry for prefix {prefix:?}"))
        })
    };
    let root = b.add_state(0, lookup(&[])?, failed(&[]));
    let mut queue = VecDeque::from([(root, Vec::<usize>::new())]);
    let mut visited = 1usize;
    while let Some((id, prefix)) = queue.pop_front() {
        let probs = table[prefix.as_slice()];
        if probs.len() != action_count {
            return Err(CapsError::InvalidPolicy(format!(
                "prefix {prefix:?}: expected {action_count} probabilities"
            )));
        }
        for (a, &p) in probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            let mut child_prefix = prefix.clone();
            child_prefix.push(a);
            let child = if child_prefix.len() == horizon {
                b.add_terminal(failed(&child_prefix))
            } else {
                let c = b.add_state(
                    child_prefix.len(),
                    lookup(&child_prefix)?,
                    failed(&child_prefix),
                );
                visited += 1;
                queue.push_back((c, child_prefix));
                c
            };
            b.connect(id, a, child);
        }
    }
    if visited != table.len() {
        return Err(CapsError::InvalidPolicy(format!(
            "{} step table entries are unreachable",
            table.len() - visited
        )));
    }
    b.build(root)
}
