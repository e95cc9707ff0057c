//! Reproducible random streams.
//!
//! Each grid cell gets a seed hashed from the master seed, the experiment
//! kind and the cell coordinates, so any cell can be rerun on its own.
//! Trials inside a cell use separate ChaCha8 streams of that seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn cell_seed(master_seed: u64, kind: &str, coords: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"caps-cell\0");
    h.update(master_seed.to_le_bytes());
    h.update(kind.as_bytes());
    h.update([0]);
    h.update(coords.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}
