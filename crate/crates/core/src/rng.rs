//! Deterministic random streams.
//!
//! Every sampler block draws from its own ChaCha stream, keyed by the master
//! seed, the sweep index and a component id. The draw stream therefore does
//! not depend on evaluation order or thread scheduling, and resuming from a
//! checkpoint only needs the chain state and the sweep index.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Component ids. Per-state blocks add the state index, per-response
/// blocks add the response index.
pub mod component {
    pub const INIT: u64 = 1;
    pub const GAMMA: u64 = 1 << 10;
    pub const RANK: u64 = 2 << 10;
    pub const F: u64 = 3 << 10;
    pub const ALPHA: u64 = 4 << 10;
    pub const BETA: u64 = 5 << 10;
    pub const RHO: u64 = 6 << 10;
    pub const XI: u64 = 7 << 10;
    pub const ZETA: u64 = 8 << 10;
    pub const SIGMA2_F: u64 = 9 << 10;
    pub const STATES: u64 = 10 << 10;
    pub const H: u64 = 11 << 10;
    pub const H0: u64 = 12 << 10;
    pub const SIGMA2_SV: u64 = 13 << 10;
    pub const W: u64 = 14 << 10;
    pub const SIGMA: u64 = 15 << 10;
}

pub fn stream_rng(seed: u64, sweep: u64, component: u64) -> ChaCha8Rng {
    debug_assert!(component < 1 << 20);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((sweep << 20) | component);
    rng
}
