//! Counter-based RNG streams.
//!
//! Every random draw in the engine comes from a stream addressed by
//! `(master seed, purpose, index)`. Two streams with different addresses are
//! independent ChaCha keystreams, so episode `i` is the same whether it is
//! generated first, last, serially or on another thread, and resuming a run
//! only needs the iteration counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose tags keep streams for different subsystems disjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Benchmark = 1,
    Init = 2,
    TrainTasks = 3,
    Augment = 4,
    Eval = 5,
    Pretrain = 6,
    Probe = 7,
    Theory = 8,
    Diagnostic = 9,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}
