//! Reproducible random streams.
//!
//! Every consumer draws from its own ChaCha8 stream selected by a
//! [`StreamKey`], so results do not depend on scheduling or on how many
//! numbers other rollouts consumed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Training,
    Evaluation,
    Check,
}

/// Identifies one independent random stream under a master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub purpose: Purpose,
    pub step: u64,
    pub index: u64,
}

impl StreamKey {
    pub fn new(purpose: Purpose, step: u64, index: u64) -> Self {
        Self { purpose, step, index }
    }

    fn stream_id(&self) -> u64 {
        let tag: u64 = match self.purpose {
            Purpose::Training => 1,
            Purpose::Evaluation => 2,
            Purpose::Check => 3,
        };
        assert!(self.step < 1 << 30 && self.index < 1 << 30, "stream key out of range");
        (tag << 60) | (self.step << 30) | self.index
    }
}

pub fn substream(seed: u64, key: StreamKey) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(key.stream_id());
    rng
}

/// One standard normal draw by the Box-Muller transform (the sine branch is discarded).
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    // u1 in (0, 1] keeps the logarithm finite
    let u1 = 1.0 - rng.gen::<f64>();
    let u2 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
