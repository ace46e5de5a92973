use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used by every sampler and generator in the crate.
pub type ChainRng = ChaCha8Rng;

/// Stream id offset reserved for synthetic-data generation, so that data
/// draws never share a stream with chain `k` sampling (stream id `k`).
pub const DATA_STREAM_BASE: u64 = 1 << 40;

/// A reproducible `(seed, stream_id)` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    /// Stream for sampling chain `chain`.
    pub fn chain(seed: u64, chain: usize) -> Self {
        RngStream::new(seed, chain as u64)
    }

    /// Stream for generating synthetic replicate `replicate`.
    pub fn data(seed: u64, replicate: usize) -> Self {
        RngStream::new(seed, DATA_STREAM_BASE + replicate as u64)
    }

    pub fn rng(&self) -> ChainRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}
