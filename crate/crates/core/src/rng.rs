//! Deterministic RNG streams.
//!
//! Every random draw in a trial comes from a stream keyed by
//! `(trial seed, purpose, system, epoch)`, so the order in which workers
//! execute can never change a result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Fleet = 1,
    Adversaries = 2,
    InitModels = 3,
    Rollout = 4,
    Attack = 5,
    Probe = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix the key parts into a single 64-bit seed.
pub fn derive_seed(trial_seed: u64, purpose: Purpose, system: u64, epoch: u64) -> u64 {
    let mut h = splitmix(trial_seed);
    for part in [purpose as u64, system, epoch] {
        h = splitmix(h ^ part);
    }
    h
}

pub fn stream(trial_seed: u64, purpose: Purpose, system: u64, epoch: u64) -> SimRng {
    SimRng::seed_from_u64(derive_seed(trial_seed, purpose, system, epoch))
}
