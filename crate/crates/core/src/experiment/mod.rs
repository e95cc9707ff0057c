//! Reproducible experiment grids.
//!
//! An experiment expands its config into grid cells, runs the cells in
//! parallel and assembles one metrics row per cell in grid order. A cell
//! that fails is reported with its error message and the run continues.

pub mod config;
pub mod report;
pub mod seeding;

pub use config::{parse_config, parse_config_str, ConfigError, ExperimentConfig, ExperimentKind};
pub use report::{fingerprint, write_report, ExperimentReport, ReportError};

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::error::{CapsError, Result};
use crate::gating::{calibrate_threshold, greedy_path_signals, GateConfig, GateMetric};
use crate::horizon::{
    asymptotic_extension_ratio, effective_horizon_approx, effective_horizon_exact,
    estimate_empirical_horizon, ideal_extension_ratio, sharpened_error, wilson_interval,
    HorizonParams, Z_95,
};
use crate::mcmc::{
    best_of_n_baseline, caps_select_block, run_receding_horizon, BlockSelector, CapsConfig, Chain,
    EpisodeTrace, System1Mode,
};
use crate::oracle::{
    bisect_flip_point, enumerate_base, enumerate_global_power, enumerate_local_tempered,
    first_action_preference, flip_threshold, tv_distance, DistributionTable,
};
use crate::policy::{PivotalWindowSpec, PolicyModel, PolicySpec};
use report::{CellTiming, Row};
use seeding::{cell_seed, trial_rng};

pub const ORACLE_COLUMNS: &[&str] = &[
    "cell",
    "alpha",
    "proposal_exponent",
    "steps",
    "thin",
    "samples",
    "tv_target",
    "tv_base",
    "acceptance_rate",
    "stagnation_run",
    "seed",
    "error",
];

pub const FLIP_COLUMNS: &[&str] = &[
    "cell",
    "alpha",
    "n_mcmc",
    "global_marginal_good",
    "global_marginal_bad",
    "score_good",
    "score_bad",
    "preferred_global",
    "local_marginal_good",
    "local_marginal_bad",
    "preferred_local",
    "trials",
    "caps_good_rate",
    "best_of_n_good_rate",
    "seed",
    "error",
];

pub const EPISODE_COLUMNS: &[&str] = &[
    "cell",
    "variant",
    "alpha",
    "n_mcmc",
    "gate_metric",
    "gamma",
    "trials",
    "successes",
    "success_rate",
    "ci_low",
    "ci_high",
    "trigger_fraction",
    "policy_calls",
    "calls_per_episode",
    "predicted_calls",
    "mean_accept_rate",
    "seed",
    "error",
];

pub const HORIZON_COLUMNS: &[&str] = &[
    "cell",
    "alpha",
    "eps",
    "N",
    "trials",
    "t_eff_hat",
    "ci_low",
    "ci_high",
    "predicted_ideal",
    "predicted_asymptotic",
    "t_eff_exact_base",
    "t_eff_exact_sharp",
    "per_pivot_error",
    "predicted_pivot_error",
    "max_tested",
    "seed",
    "error",
];

pub fn columns_for(kind: ExperimentKind) -> &'static [&'static str] {
    match kind {
        ExperimentKind::Oracle => ORACLE_COLUMNS,
        ExperimentKind::Flip => FLIP_COLUMNS,
        ExperimentKind::Ablation | ExperimentKind::Episode => EPISODE_COLUMNS,
        ExperimentKind::Horizon => HORIZON_COLUMNS,
    }
}

/// One grid point: its coordinates (already in row form) and the work to run.
struct Cell<T> {
    coords: Vec<(&'static str, Value)>,
    job: T,
}

struct CellOutput {
    metrics: Vec<(&'static str, Value)>,
    traces: Option<String>,
}

fn coord_key(coords: &[(&'static str, Value)]) -> String {
    coords
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(";")
}

fn run_cells<T: Sync>(
    config: &ExperimentConfig,
    report: &mut ExperimentReport,
    cells: Vec<Cell<T>>,
    f: impl Fn(&T, u64) -> Result<CellOutput> + Sync,
) {
    let kind = config.kind.as_str();
    let outputs: Vec<(Row, f64, Option<String>)> = cells
        .par_iter()
        .enumerate()
        .map(|(i, cell)| {
            let seed = cell_seed(config.master_seed, kind, &coord_key(&cell.coords));
            let started = Instant::now();
            let result = f(&cell.job, seed);
            let ms = started.elapsed().as_secs_f64() * 1e3;
            let mut row = Row::new();
            row.insert("cell".into(), json!(i));
            for (k, v) in &cell.coords {
                row.insert((*k).into(), v.clone());
            }
            let traces = match result {
                Ok(out) => {
                    for (k, v) in out.metrics {
                        row.insert(k.into(), v);
                    }
                    out.traces
                }
                Err(e) => {
                    row.insert("error".into(), json!(e.to_string()));
                    None
                }
            };
            row.insert("seed".into(), json!(seed.to_string()));
            (row, ms, traces)
        })
        .collect();
    let mut traces = String::new();
    for (i, (mut row, ms, t)) in outputs.into_iter().enumerate() {
        for c in &report.columns {
            row.entry(c.clone()).or_insert(Value::Null);
        }
        report.rows.push(row);
        report.timings.push(CellTiming {
            cell: i,
            wall_clock_ms: ms,
        });
        if let Some(t) = t {
            traces.push_str(&t);
        }
    }
    if config.kind == ExperimentKind::Episode {
        report.traces = Some(traces);
    }
}

/// Runs every cell of the configured grid. Per-cell failures are recorded
/// in the report; an error is returned only when the run cannot start.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let policy = config.policy.build()?;
    let mut report = ExperimentReport::new(
        config.kind.as_str(),
        fingerprint(config),
        config.master_seed,
        columns_for(config.kind),
    );
    match config.kind {
        ExperimentKind::Oracle => run_oracle(config, &policy, &mut report)?,
        ExperimentKind::Flip => run_flip(config, &policy, &mut report)?,
        ExperimentKind::Ablation | ExperimentKind::Episode => {
            run_episodes_grid(config, &policy, &mut report)?
        }
        ExperimentKind::Horizon => run_horizon(config, &mut report)?,
    }
    Ok(report)
}

fn finite(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn run_oracle(
    config: &ExperimentConfig,
    policy: &PolicyModel,
    report: &mut ExperimentReport,
) -> Result<()> {
    let base = enumerate_base(policy)?;
    let beta = config.caps.proposal_exponent;
    let cells = config
        .alpha_grid
        .iter()
        .map(|&alpha| Cell {
            coords: vec![("alpha", json!(alpha)), ("proposal_exponent", json!(beta))],
            job: alpha,
        })
        .collect();
    let chain = config.chain;
    run_cells(config, report, cells, |&alpha, seed| {
        let caps = CapsConfig {
            alpha,
            block_len: policy.horizon(),
            gate: GateConfig::always(),
            ..config.caps
        };
        let counts = chain_visit_counts(policy, &caps, chain.steps, chain.thin, seed)?;
        let samples: u64 = counts.0.values().sum();
        let empirical = DistributionTable::from_counts(&base, &counts.0)?;
        let target = enumerate_global_power(policy, alpha)?;
        let d = counts.1;
        Ok(CellOutput {
            metrics: vec![
                ("steps", json!(chain.steps)),
                ("thin", json!(chain.thin)),
                ("samples", json!(samples)),
                ("tv_target", json!(tv_distance(&empirical, &target)?)),
                ("tv_base", json!(tv_distance(&empirical, &base)?)),
                ("acceptance_rate", json!(d.acceptance_rate)),
                ("stagnation_run", json!(d.stagnation_run)),
            ],
            traces: None,
        })
    });
    Ok(())
}

/// Runs a full-horizon chain from the greedy trajectory and counts the
/// state after every `thin`-th step.
pub fn chain_visit_counts(
    policy: &PolicyModel,
    caps: &CapsConfig,
    steps: usize,
    thin: usize,
    seed: u64,
) -> Result<(HashMap<Vec<usize>, u64>, crate::mcmc::ChainDiagnostics)> {
    if thin == 0 {
        return Err(CapsError::InvalidParameter("thin must be >= 1".into()));
    }
    let mut rng = trial_rng(seed, 0);
    let init = policy.greedy_from(policy.root(), policy.horizon());
    let mut chain = Chain::new(policy, policy.root(), init, caps)?;
    let mut counts: HashMap<Vec<usize>, u64> = HashMap::new();
    for i in 1..=steps {
        chain.step(&mut rng)?;
        if i % thin == 0 {
            *counts.entry(chain.current().actions.clone()).or_default() += 1;
        }
    }
    Ok((counts, chain.diagnostics()))
}

fn run_flip(
    config: &ExperimentConfig,
    policy: &PolicyModel,
    report: &mut ExperimentReport,
) -> Result<()> {
    let PolicySpec::Pivotal(spec) = &config.policy else {
        return Err(CapsError::InvalidParameter(
            "flip experiments need a pivotal policy".into(),
        ));
    };
    let (good, bad) = (PivotalWindowSpec::GOOD, PivotalWindowSpec::BAD);
    let label = |a: usize| json!(if a == good { "good" } else { "bad" });
    let mut cells = Vec::new();
    for &alpha in &config.alpha_grid {
        for &n in &config.n_mcmc_grid {
            cells.push(Cell {
                coords: vec![("alpha", json!(alpha)), ("n_mcmc", json!(n))],
                job: (alpha, n),
            });
        }
    }
    let trials = config.trials;
    run_cells(config, report, cells, |&(alpha, n), seed| {
        let global = first_action_preference(&enumerate_global_power(policy, alpha)?, good, bad);
        let local = first_action_preference(&enumerate_local_tempered(policy, alpha)?, good, bad);
        let caps = CapsConfig {
            alpha,
            n_mcmc: n,
            block_len: policy.horizon(),
            gate: GateConfig::always(),
            ..config.caps
        };
        let picks: Vec<(bool, bool)> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = trial_rng(seed, t as u64);
                let c = caps_select_block(policy, policy.root(), &caps, &mut rng)?;
                let b = best_of_n_baseline(policy, policy.root(), n + 1, &mut rng)?;
                Ok((c.block.actions[0] == good, b.actions[0] == good))
            })
            .collect::<Result<_>>()?;
        let caps_good = picks.iter().filter(|p| p.0).count() as f64 / trials as f64;
        let bon_good = picks.iter().filter(|p| p.1).count() as f64 / trials as f64;
        Ok(CellOutput {
            metrics: vec![
                (
                    "global_marginal_good",
                    json!(global.first_action_marginals[good]),
                ),
                (
                    "global_marginal_bad",
                    json!(global.first_action_marginals[bad]),
                ),
                ("score_good", json!(global.score_good)),
                ("score_bad", json!(global.score_bad)),
                ("preferred_global", label(global.preferred_action)),
                (
                    "local_marginal_good",
                    json!(local.first_action_marginals[good]),
                ),
                (
                    "local_marginal_bad",
                    json!(local.first_action_marginals[bad]),
                ),
                ("preferred_local", label(local.preferred_action)),
                ("trials", json!(trials)),
                ("caps_good_rate", json!(caps_good)),
                ("best_of_n_good_rate", json!(bon_good)),
            ],
            traces: None,
        })
    });

    let threshold = flip_threshold(spec.eps_good, spec.eps_bad, spec.branch_count);
    let root = bisect_flip_point(policy, good, bad, 1.0, 20.0, 1e-9);
    report.summary = json!({
        "flip_threshold_exact": threshold.as_ref().ok().map(|t| t.exact),
        "flip_threshold_closed_form_approximation": threshold.as_ref().ok().map(|t| t.approx),
        "closed_form_note": "the closed form ln(eps_bad/eps_good)/ln(N) + 1 does not solve \
            eps_good^alpha = eps_bad^alpha * N^(1-alpha); the exact root is authoritative",
        "bisection_root": root.as_ref().ok(),
        "error": threshold.err().or(root.err()).map(|e| e.to_string()),
    });
    Ok(())
}

#[derive(Debug, Clone, Copy)]
struct EpisodeJob {
    variant: &'static str,
    selector: BlockSelector,
    n_mcmc: usize,
}

/// Aggregates over a batch of episodes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeStats {
    pub trials: u64,
    pub successes: u64,
    pub blocks: u64,
    pub system2_blocks: u64,
    pub policy_calls: u64,
    pub accepted: u64,
    pub mcmc_steps: u64,
}

impl EpisodeStats {
    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }

    pub fn trigger_fraction(&self) -> f64 {
        if self.blocks == 0 {
            0.0
        } else {
            self.system2_blocks as f64 / self.blocks as f64
        }
    }

    pub fn calls_per_episode(&self) -> f64 {
        self.policy_calls as f64 / self.trials as f64
    }

    pub fn mean_accept_rate(&self) -> Option<f64> {
        (self.mcmc_steps > 0).then(|| self.accepted as f64 / self.mcmc_steps as f64)
    }
}

/// Runs `trials` full episodes, trial `t` on stream `t` of `seed`. Returns
/// the aggregate and the traces of the first `keep_traces` trials.
pub fn run_episode_batch(
    policy: &PolicyModel,
    selector: &BlockSelector,
    trials: usize,
    seed: u64,
    keep_traces: usize,
) -> Result<(EpisodeStats, Vec<EpisodeTrace>)> {
    let traces: Vec<EpisodeTrace> = (0..trials)
        .into_par_iter()
        .map(|t| {
            run_receding_horizon(
                policy,
                selector,
                policy.horizon(),
                &mut trial_rng(seed, t as u64),
            )
        })
        .collect::<Result<_>>()?;
    let mut s = EpisodeStats {
        trials: trials as u64,
        ..EpisodeStats::default()
    };
    for t in &traces {
        s.successes += u64::from(!t.failed);
        s.blocks += t.blocks.len() as u64;
        s.system2_blocks += t.system2_blocks as u64;
        s.policy_calls += t.policy_calls;
        s.accepted += t.accepted as u64;
        s.mcmc_steps += t.mcmc_steps as u64;
    }
    let kept = traces.into_iter().take(keep_traces).collect();
    Ok((s, kept))
}

fn run_episodes_grid(
    config: &ExperimentConfig,
    policy: &PolicyModel,
    report: &mut ExperimentReport,
) -> Result<()> {
    let caps = config.caps;
    let target = config.gating.trigger_target;
    let signals = greedy_path_signals(policy, caps.block_len)?;
    let calibrated = |metric: GateMetric| -> Result<f64> {
        let values: Vec<f64> = signals
            .iter()
            .map(|s| {
                if metric == GateMetric::MinProb {
                    s.min_prob
                } else {
                    s.mean_entropy
                }
            })
            .collect();
        calibrate_threshold(metric, &values, target)
    };
    let gammas: Vec<f64> = match &config.gamma_grid {
        Some(g) => g.clone(),
        None => match caps.gate.metric {
            GateMetric::Entropy | GateMetric::MinProb => vec![calibrated(caps.gate.metric)?],
            _ => vec![caps.gate.threshold],
        },
    };
    let with = |alpha: f64, n: usize, gate: GateConfig| CapsConfig {
        alpha,
        n_mcmc: n,
        gate,
        ..caps
    };

    let mut cells = Vec::new();
    let mut push = |variant: &'static str, selector: BlockSelector, n: usize| {
        let (alpha, gate) = match &selector {
            BlockSelector::Caps(c) | BlockSelector::BestOfN(c) => (c.alpha, c.gate),
            BlockSelector::ExactPower { alpha, .. } => (*alpha, GateConfig::always()),
        };
        let gamma = match gate.metric {
            GateMetric::Entropy | GateMetric::MinProb => finite(gate.threshold),
            GateMetric::Random => json!(gate.random_rate),
            _ => Value::Null,
        };
        let metric = serde_json::to_value(gate.metric).expect("metric serialises");
        cells.push(Cell {
            coords: vec![
                ("variant", json!(variant)),
                ("alpha", json!(alpha)),
                ("n_mcmc", json!(n)),
                ("gate_metric", metric),
                ("gamma", gamma),
            ],
            job: EpisodeJob {
                variant,
                selector,
                n_mcmc: n,
            },
        });
    };

    let variants: Vec<&'static str> = if config.kind == ExperimentKind::Episode {
        vec!["caps_gated"]
    } else {
        config
            .ablation
            .variants
            .iter()
            .filter_map(|v| {
                config::AblationSettings::ALLOWED
                    .iter()
                    .find(|a| **a == v.as_str())
                    .copied()
            })
            .collect()
    };
    for &alpha in &config.alpha_grid {
        for &n in &config.n_mcmc_grid {
            for &variant in &variants {
                match variant {
                    "greedy" => push(
                        variant,
                        BlockSelector::Caps(with(alpha, n, GateConfig::never())),
                        n,
                    ),
                    "flat_search" => push(
                        variant,
                        BlockSelector::Caps(with(1.0, n, GateConfig::always())),
                        n,
                    ),
                    "best_of_n" => push(
                        variant,
                        BlockSelector::BestOfN(with(alpha, n, GateConfig::always())),
                        n,
                    ),
                    "caps_always" => push(
                        variant,
                        BlockSelector::Caps(with(alpha, n, GateConfig::always())),
                        n,
                    ),
                    "caps_gated" => {
                        for &g in &gammas {
                            let gate = GateConfig {
                                threshold: g,
                                ..caps.gate
                            };
                            push(variant, BlockSelector::Caps(with(alpha, n, gate)), n);
                        }
                    }
                    "gated_min_prob" => {
                        let gate = GateConfig::min_prob(calibrated(GateMetric::MinProb)?);
                        push(variant, BlockSelector::Caps(with(alpha, n, gate)), n);
                    }
                    "gated_random" => {
                        push(
                            variant,
                            BlockSelector::Caps(with(alpha, n, GateConfig::random(target))),
                            n,
                        );
                    }
                    _ => unreachable!("variants are validated"),
                }
            }
        }
    }

    let trials = config.trials;
    let keep = if config.kind == ExperimentKind::Episode {
        config.episode.trace_trials
    } else {
        0
    };
    let blocks = signals.len() as f64;
    run_cells(config, report, cells, |job, seed| {
        let (s, traces) = run_episode_batch(policy, &job.selector, trials, seed, keep)?;
        let (lo, hi) = wilson_interval(s.successes, s.trials, Z_95);
        let predicted = blocks * (1.0 + s.trigger_fraction() * job.n_mcmc as f64);
        let mut lines = String::new();
        for (t, trace) in traces.iter().enumerate() {
            for b in &trace.blocks {
                let mut v = serde_json::to_value(b).expect("block record serialises");
                v["variant"] = json!(job.variant);
                v["trial"] = json!(t);
                lines.push_str(&v.to_string());
                lines.push('\n');
            }
        }
        Ok(CellOutput {
            metrics: vec![
                ("trials", json!(s.trials)),
                ("successes", json!(s.successes)),
                ("success_rate", json!(s.success_rate())),
                ("ci_low", json!(lo)),
                ("ci_high", json!(hi)),
                ("trigger_fraction", json!(s.trigger_fraction())),
                ("policy_calls", json!(s.policy_calls)),
                ("calls_per_episode", json!(s.calls_per_episode())),
                ("predicted_calls", json!(predicted)),
                ("mean_accept_rate", json!(s.mean_accept_rate())),
            ],
            traces: (keep > 0).then_some(lines),
        })
    });
    Ok(())
}

fn run_horizon(config: &ExperimentConfig, report: &mut ExperimentReport) -> Result<()> {
    let PolicySpec::Drift(env) = &config.policy else {
        return Err(CapsError::InvalidParameter(
            "horizon experiments need a drift policy".into(),
        ));
    };
    let h = config.horizon;
    let mut cells = Vec::new();
    for &alpha in &config.alpha_grid {
        for &n in &config.n_mcmc_grid {
            cells.push(Cell {
                coords: vec![
                    ("alpha", json!(alpha)),
                    ("eps", json!(env.eps)),
                    ("N", json!(n)),
                ],
                job: (alpha, n),
            });
        }
    }
    let trials = config.trials;
    run_cells(config, report, cells, |&(alpha, n), seed| {
        // The base policy drifts only when sampled, so System 1 samples here.
        let caps = CapsConfig {
            alpha,
            n_mcmc: n,
            system1: System1Mode::Sample,
            gate: if alpha == 1.0 {
                GateConfig::never()
            } else {
                GateConfig::always()
            },
            ..config.caps
        };
        let selector = if h.exact_power && alpha > 1.0 {
            BlockSelector::ExactPower {
                alpha,
                block_len: caps.block_len,
            }
        } else {
            BlockSelector::Caps(caps)
        };
        let est = estimate_empirical_horizon(env, &selector, trials, h.eta, seed)?;
        let approx = effective_horizon_approx(env.eps, h.eta).ok();
        let params = HorizonParams {
            eps: env.eps,
            alpha,
            eta: h.eta,
            mixing_rate: h.mixing_rate,
            dist_const: h.dist_const,
            budget: n as f64,
        };
        let sharp = sharpened_error(env.eps, alpha);
        Ok(CellOutput {
            metrics: vec![
                ("trials", json!(trials)),
                ("t_eff_hat", json!(est.t_eff_hat)),
                ("ci_low", json!(est.ci_low)),
                ("ci_high", json!(est.ci_high)),
                (
                    "predicted_ideal",
                    json!(approx.map(|a| a * ideal_extension_ratio(env.eps, alpha))),
                ),
                (
                    "predicted_asymptotic",
                    json!(approx.map(|a| a * asymptotic_extension_ratio(&params))),
                ),
                (
                    "t_eff_exact_base",
                    json!(effective_horizon_exact(env.eps, h.eta).ok()),
                ),
                (
                    "t_eff_exact_sharp",
                    json!(effective_horizon_exact(sharp, h.eta).ok()),
                ),
                ("per_pivot_error", json!(est.per_pivot_error())),
                ("predicted_pivot_error", json!(sharp)),
                ("max_tested", json!(est.max_tested)),
            ],
            traces: None,
        })
    });
    Ok(())
}
