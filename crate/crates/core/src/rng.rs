//! Seeded, counter-based random streams. Every source of randomness in the
//! crate derives from one master seed plus a stream index, so rollout workers
//! draw from independent streams and results do not depend on scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Master seed for a run; hands out independent streams by index.
#[derive(Debug, Clone, Copy)]
pub struct SeedSequence {
    master: u64,
}

impl SeedSequence {
    pub fn new(master: u64) -> Self {
        SeedSequence { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Independent stream `index` of the master seed.
    pub fn stream(&self, index: u64) -> Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(index);
        rng
    }
}
