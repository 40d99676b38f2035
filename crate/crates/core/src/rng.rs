//! Named random sub-streams derived from a single master seed.
//!
//! Every consumer of randomness (geometry, fading, blockage, arrivals, solver
//! initialization) draws from its own ChaCha stream, so switching a feature on
//! or off never shifts the numbers another feature sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The independent random streams of one replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Geometry,
    Fading,
    Blockage,
    Arrivals,
    SolverInit,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Geometry => 1,
            Stream::Fading => 2,
            Stream::Blockage => 3,
            Stream::Arrivals => 4,
            Stream::SolverInit => 5,
        }
    }
}

/// Builds the generator for `stream` of replication `replication`.
pub fn stream_rng(master_seed: u64, replication: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    // 2^64 word streams per key; the low bits carry the stream tag.
    rng.set_stream((replication << 8) | stream.tag());
    rng
}

/// All per-replication streams, owned by the simulation loop.
#[derive(Debug, Clone)]
pub struct Streams {
    pub fading: ChaCha8Rng,
    pub blockage: ChaCha8Rng,
    pub arrivals: ChaCha8Rng,
    pub solver_init: ChaCha8Rng,
}

impl Streams {
    pub fn new(master_seed: u64, replication: u64) -> Self {
        Self {
            fading: stream_rng(master_seed, replication, Stream::Fading),
            blockage: stream_rng(master_seed, replication, Stream::Blockage),
            arrivals: stream_rng(master_seed, replication, Stream::Arrivals),
            solver_init: stream_rng(master_seed, replication, Stream::SolverInit),
        }
    }
}
