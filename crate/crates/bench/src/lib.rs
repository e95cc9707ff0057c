//! Fixtures shared by the criterion benchmarks.

use caps_core::policy::{
    make_mixed_env_policy, make_random_policy, MixedEnvSpec, RandomPolicySpec,
};
use caps_core::{CapsConfig, GateConfig, PolicyModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// |A| = 4, T = 4: the oracle-comparison space (256 trajectories).
pub fn small_random_policy() -> PolicyModel {
    make_random_policy(&RandomPolicySpec::new(4, 4, 1.5, 11)).expect("valid spec")
}

/// Ten blocks of four steps, pivotal blocks 2 and 7.
pub fn mixed_env() -> PolicyModel {
    make_mixed_env_policy(&MixedEnvSpec {
        action_count: 4,
        block_len: 4,
        blocks: 10,
        pivotal_blocks: vec![2, 7],
        good_prob: 0.4,
        noise: 0.05,
    })
    .expect("valid spec")
}

pub fn always_on(alpha: f64, n_mcmc: usize, block_len: usize) -> CapsConfig {
    CapsConfig {
        alpha,
        n_mcmc,
        block_len,
        gate: GateConfig::always(),
        ..CapsConfig::default()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
