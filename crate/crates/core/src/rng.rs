//! Seeding conventions.
//!
//! Every random draw in the crate comes from a ChaCha8 stream cipher used as
//! a counter-based generator. A root seed is expanded with
//! `SeedableRng::seed_from_u64`, and independent substreams are addressed by
//! the 64-bit ChaCha stream id. Ports to other languages can reproduce the
//! same statistics by following this scheme; bit-identical streams are not
//! part of the contract.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Substream `stream` of the root `seed`.
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
