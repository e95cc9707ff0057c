//! Experiment configuration files.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "kind": "ablation",
//!   "policy": {"kind": "mixed", "block_len": 4, "blocks": 10, "pivotal_blocks": [2, 7]},
//!   "caps": {"alpha": 2.0, "n_mcmc": 30, "block_len": 4,
//!            "gate": {"metric": "entropy", "threshold_nats": 0.9}},
//!   "grid": {"alpha": [2.0], "n_mcmc": [0, 30], "gamma": [0.9]},
//!   "trials": 2000,
//!   "master_seed": 7
//! }
//! ```
//!
//! Every field except `kind` has a default; `policy` may also be
//! `{"path": "policy.json"}`, resolved against the config file's directory.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mcmc::CapsConfig;
use crate::policy::{
    DriftChainSpec, MixedEnvSpec, PivotalWindowSpec, PolicyModel, PolicySpec, RandomPolicySpec,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Oracle,
    Flip,
    Ablation,
    Horizon,
    Episode,
}

impl ExperimentKind {
    pub const ALLOWED: [&'static str; 5] = ["oracle", "flip", "ablation", "horizon", "episode"];

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "oracle" => Self::Oracle,
            "flip" => Self::Flip,
            "ablation" => Self::Ablation,
            "horizon" => Self::Horizon,
            "episode" => Self::Episode,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        Self::ALLOWED[self as usize]
    }

    /// Policy used when the config does not name one.
    pub fn default_policy(self) -> PolicySpec {
        match self {
            Self::Oracle => PolicySpec::Random(RandomPolicySpec::new(4, 4, 1.5, 11)),
            Self::Flip => PolicySpec::Pivotal(PivotalWindowSpec::new(0.1, 0.2, 10, 1)),
            Self::Ablation | Self::Episode => PolicySpec::Mixed(MixedEnvSpec {
                action_count: 4,
                block_len: 4,
                blocks: 10,
                pivotal_blocks: vec![2, 7],
                good_prob: 0.4,
                noise: 0.05,
            }),
            Self::Horizon => PolicySpec::Drift(DriftChainSpec::every_step(0.1, 100)),
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicyRef {
    Path { path: PathBuf },
    Inline(PolicySpec),
}

/// Sweep axes. A missing axis takes the single value from `caps`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub alpha: Option<Vec<f64>>,
    pub n_mcmc: Option<Vec<usize>>,
    /// Gate thresholds for gated cells.
    pub gamma: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HorizonSettings {
    /// η: success floor defining the effective horizon.
    pub eta: f64,
    /// ρ used for the asymptotic prediction.
    pub mixing_rate: f64,
    /// C used for the asymptotic prediction.
    pub dist_const: f64,
    /// Draw each block exactly from the power distribution instead of MCMC.
    pub exact_power: bool,
}

impl Default for HorizonSettings {
    fn default() -> Self {
        Self {
            eta: 0.5,
            mixing_rate: 0.5,
            dist_const: 1.0,
            exact_power: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSettings {
    /// Chain length for oracle comparisons.
    pub steps: usize,
    /// Keep every `thin`-th state.
    pub thin: usize,
}

impl Default for ChainSettings {
    fn default() -> Self {
        Self {
            steps: 100_000,
            thin: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    /// Variants to run, in output order.
    pub variants: Vec<String>,
}

impl AblationSettings {
    pub const ALLOWED: [&'static str; 7] = [
        "greedy",
        "flat_search",
        "best_of_n",
        "caps_always",
        "caps_gated",
        "gated_min_prob",
        "gated_random",
    ];
}

impl Default for AblationSettings {
    fn default() -> Self {
        Self {
            variants: Self::ALLOWED[..5].iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatingSettings {
    /// System 2 trigger fraction targeted when a gate threshold is
    /// calibrated on the greedy path's block signals.
    pub trigger_target: f64,
}

impl Default for GatingSettings {
    fn default() -> Self {
        Self {
            trigger_target: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSettings {
    /// Trials per cell whose block records go to `traces.jsonl`.
    pub trace_trials: usize,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        Self { trace_trials: 10 }
    }
}

/// The file format, before validation. `kind` stays a string so an unknown
/// kind is reported together with every other violation.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default = "default_schema")]
    schema_version: u32,
    kind: String,
    #[serde(default)]
    policy: Option<PolicyRef>,
    #[serde(default)]
    caps: CapsConfig,
    #[serde(default)]
    grid: GridSpec,
    #[serde(default = "default_trials")]
    trials: usize,
    #[serde(default)]
    master_seed: u64,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    horizon: HorizonSettings,
    #[serde(default)]
    chain: ChainSettings,
    #[serde(default)]
    ablation: AblationSettings,
    #[serde(default)]
    gating: GatingSettings,
    #[serde(default)]
    episode: EpisodeSettings,
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

fn default_trials() -> usize {
    1000
}

/// A validated configuration with every default resolved.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub policy: PolicySpec,
    pub caps: CapsConfig,
    pub alpha_grid: Vec<f64>,
    pub n_mcmc_grid: Vec<usize>,
    /// Gate thresholds; `None` calibrates one to `gating.trigger_target`.
    pub gamma_grid: Option<Vec<f64>>,
    pub trials: usize,
    pub master_seed: u64,
    /// Not part of the fingerprint.
    #[serde(skip)]
    pub output_dir: PathBuf,
    pub horizon: HorizonSettings,
    pub chain: ChainSettings,
    pub ablation: AblationSettings,
    pub gating: GatingSettings,
    pub episode: EpisodeSettings,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: parse error at line {line}, column {column}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
}

/// Reads and validates a config file.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, base).map_err(|e| match e {
        ConfigError::Parse {
            line,
            column,
            message,
            ..
        } => ConfigError::Parse {
            path: path.to_path_buf(),
            line,
            column,
            message,
        },
        other => other,
    })
}

/// Parses config text; relative policy paths resolve against `base_dir`.
pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<ExperimentConfig, ConfigError> {
    let parse_err = |e: serde_json::Error| ConfigError::Parse {
        path: PathBuf::from("<config>"),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    };
    let raw: RawConfig = serde_json::from_str(text).map_err(parse_err)?;
    let mut errors = Vec::new();

    if raw.schema_version != SCHEMA_VERSION {
        errors.push(format!(
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            raw.schema_version
        ));
    }
    let kind = ExperimentKind::parse(&raw.kind);
    if kind.is_none() {
        errors.push(format!(
            "unknown experiment kind {:?}; allowed kinds: {}",
            raw.kind,
            ExperimentKind::ALLOWED.join(", ")
        ));
    }

    let policy = match (raw.policy, kind) {
        (Some(PolicyRef::Inline(p)), _) => Some(p),
        (Some(PolicyRef::Path { path }), _) => {
            let full = base_dir.join(&path);
            match std::fs::read_to_string(&full) {
                Ok(t) => match PolicySpec::from_json(&t) {
                    Ok(p) => Some(p),
                    Err(e) => {
                        errors.push(format!("policy file {}: {e}", full.display()));
                        None
                    }
                },
                Err(e) => {
                    errors.push(format!("cannot read policy file {}: {e}", full.display()));
                    None
                }
            }
        }
        (None, Some(k)) => Some(k.default_policy()),
        (None, None) => None,
    };
    let built = policy.as_ref().map(|p| p.build());
    if let Some(Err(e)) = &built {
        errors.push(format!("policy: {e}"));
    }

    errors.extend(raw.caps.violations());
    let alpha_grid = raw.grid.alpha.unwrap_or_else(|| vec![raw.caps.alpha]);
    let n_mcmc_grid = raw.grid.n_mcmc.unwrap_or_else(|| vec![raw.caps.n_mcmc]);
    let gamma_grid = raw.grid.gamma.clone();
    for (name, empty) in [
        ("alpha", alpha_grid.is_empty()),
        ("n_mcmc", n_mcmc_grid.is_empty()),
        ("gamma", gamma_grid.as_ref().is_some_and(|g| g.is_empty())),
    ] {
        if empty {
            errors.push(format!("grid.{name} must not be empty"));
        }
    }
    for a in &alpha_grid {
        if !(*a >= 1.0 && a.is_finite()) {
            errors.push(format!("alpha must be ≥ 1, got {a} in grid.alpha"));
        }
    }
    for g in gamma_grid.iter().flatten() {
        if !(*g >= 0.0) {
            errors.push(format!("gamma must be >= 0, got {g} in grid.gamma"));
        }
    }
    if raw.trials == 0 {
        errors.push("trials must be >= 1".into());
    }
    let h = &raw.horizon;
    for (name, v) in [
        ("horizon.eta", h.eta),
        ("horizon.mixing_rate", h.mixing_rate),
    ] {
        if !(v > 0.0 && v < 1.0) {
            errors.push(format!("{name} must lie in (0, 1), got {v}"));
        }
    }
    if !(h.dist_const > 0.0) {
        errors.push(format!(
            "horizon.dist_const must be > 0, got {}",
            h.dist_const
        ));
    }
    if raw.chain.steps == 0 || raw.chain.thin == 0 {
        errors.push("chain.steps and chain.thin must be >= 1".into());
    }
    for v in &raw.ablation.variants {
        if !AblationSettings::ALLOWED.contains(&v.as_str()) {
            errors.push(format!(
                "unknown ablation variant {v:?}; allowed: {}",
                AblationSettings::ALLOWED.join(", ")
            ));
        }
    }
    if !(0.0..=1.0).contains(&raw.gating.trigger_target) {
        errors.push("gating.trigger_target must lie in [0, 1]".into());
    }

    if let (Some(k), Some(p), Some(Ok(model))) = (kind, &policy, &built) {
        errors.extend(kind_violations(k, p, model, &raw.chain));
    }

    if !errors.is_empty() {
        return Err(ConfigError::Invalid(errors));
    }
    Ok(ExperimentConfig {
        schema_version: raw.schema_version,
        kind: kind.expect("validated"),
        policy: policy.expect("validated"),
        caps: raw.caps,
        alpha_grid,
        n_mcmc_grid,
        gamma_grid,
        trials: raw.trials,
        master_seed: raw.master_seed,
        output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("caps-out")),
        horizon: raw.horizon,
        chain: raw.chain,
        ablation: raw.ablation,
        gating: raw.gating,
        episode: raw.episode,
    })
}

fn kind_violations(
    kind: ExperimentKind,
    policy: &PolicySpec,
    model: &PolicyModel,
    chain: &ChainSettings,
) -> Vec<String> {
    let mut v = Vec::new();
    match kind {
        ExperimentKind::Flip if !matches!(policy, PolicySpec::Pivotal(_)) => {
            v.push("flip experiments need a pivotal policy".into())
        }
        ExperimentKind::Horizon if !matches!(policy, PolicySpec::Drift(_)) => {
            v.push("horizon experiments need a drift policy".into())
        }
        ExperimentKind::Oracle => {
            let space = (model.action_space().size() as f64).powi(model.horizon() as i32);
            if space > crate::oracle::DEFAULT_ENUMERATION_CAP as f64 {
                v.push("oracle experiments need an enumerable policy".into());
            }
            if chain.thin > chain.steps {
                v.push("chain.thin must not exceed chain.steps".into());
            }
        }
        _ => {}
    }
    v
}

impl ExperimentConfig {
    /// Canonical JSON of every semantic field (object keys sorted).
    pub fn canonical_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}
