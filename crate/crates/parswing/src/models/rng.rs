//! Deterministic random-number streams.
//!
//! Every consumer of randomness derives its generator from a [`StreamKey`]:
//! a master seed plus a domain tag and two indices (typically iteration and
//! sub-batch). Within a stream, each path gets its own counter-based
//! sub-stream, so path `m` is reproducible independently of how a batch is
//! split into blocks or threads.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Training batches, keyed by (iteration, sub-batch).
pub const DOMAIN_TRAIN: u64 = 1;
/// Valuation paths.
pub const DOMAIN_EVAL: u64 = 2;
/// Optimizer-injected exploration noise.
pub const DOMAIN_OPT: u64 = 3;
/// Parameter initialization.
pub const DOMAIN_INIT: u64 = 4;
/// Fixed sample used to value checkpointed parameters.
pub const DOMAIN_CHECKPOINT_EVAL: u64 = 5;

/// Identifies one random stream: all draws are a pure function of the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamKey {
    pub seed: u64,
    pub domain: u64,
    pub major: u64,
    pub minor: u64,
}

impl StreamKey {
    pub fn new(seed: u64, domain: u64, major: u64, minor: u64) -> Self {
        StreamKey { seed, domain, major, minor }
    }

    /// Base generator of the stream. The four key words fill the 32-byte
    /// cipher seed directly, so distinct keys give independent generators.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed[0..8].copy_from_slice(&self.seed.to_le_bytes());
        seed[8..16].copy_from_slice(&self.domain.to_le_bytes());
        seed[16..24].copy_from_slice(&self.major.to_le_bytes());
        seed[24..32].copy_from_slice(&self.minor.to_le_bytes());
        ChaCha8Rng::from_seed(seed)
    }

    /// Generator for path `m`: the base generator switched to cipher
    /// stream `m`.
    pub fn path_rng(&self, m: u64) -> ChaCha8Rng {
        let mut rng = self.rng();
        rng.set_stream(m.into());
        rng
    }
}
