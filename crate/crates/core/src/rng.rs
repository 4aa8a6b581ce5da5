use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for one consumer of a run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream ids, one per consumer, so that changing how much one consumer
/// draws never shifts another.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const BACKBONE_INIT: u64 = 3;
    pub const PRETRAIN: u64 = 4;
    pub const ADAPTER_INIT: u64 = 5;
    pub const HEAD_INIT: u64 = 6;
    pub const SAMPLER: u64 = 7;
    pub const AUGMENT: u64 = 8;
    pub const DROPOUT: u64 = 9;
    pub const KMEANS: u64 = 10;
}
