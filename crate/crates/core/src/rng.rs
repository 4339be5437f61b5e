use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator for an independent stream keyed by `(seed, stream)`.
pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Named stream ids, so that each consumer of randomness is decoupled.
pub(crate) mod streams {
    pub const SYNTHETIC: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const DOWNSAMPLE: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
}
