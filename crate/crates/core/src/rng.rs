//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! one run seed and a fixed purpose tag, so adding a consumer never shifts
//! the draws seen by another.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream tags. Values are part of the reproducibility contract.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const MASKING: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const SYNTHETIC: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const QA: u64 = 7;
    pub const SWEEP: u64 = 8;
}

/// Stream `index` of `purpose` under `seed`.
pub fn stream(seed: u64, purpose: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 40) ^ index);
    rng
}

/// Standard normal draw (Box-Muller).
pub fn normal(rng: &mut Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// Normal(0, std) draw rejected outside +-2 std.
pub fn truncated_normal(rng: &mut Rng, std: f64) -> f64 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}
