//! Context-aware power sampling over tabular autoregressive policies.
//!
//! The crate is organised bottom-up: [`policy`] defines the policies and the
//! synthetic environments, [`oracle`] enumerates exact target distributions,
//! [`gating`] decides when to search, [`mcmc`] runs the block-level
//! Metropolis-Hastings refinement, [`horizon`] holds the effective-horizon
//! analysis and [`experiment`] drives reproducible experiment grids.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x >= 0.0)` also rejects NaN.

pub mod error;
pub mod experiment;
pub mod gating;
pub mod horizon;
pub mod logspace;
pub mod mcmc;
pub mod oracle;
pub mod policy;

pub use error::{CapsError, Result};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentKind, ExperimentReport};
pub use gating::{BlockSignals, GateConfig, GateDecision, GateMetric, GateMode};
pub use mcmc::{BlockSelector, CapsConfig, ChainDiagnostics, EpisodeTrace, System1Mode};
pub use oracle::{DistributionTable, PreferenceReport};
pub use policy::{ActionSpace, PolicyModel, PolicySpec, Trajectory};
