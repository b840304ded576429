//! Seeding helpers.
//!
//! One optimizer run owns three independent ChaCha streams derived from a
//! single seed: data sampling, sketch draws, and stepsize draws. Changing the
//! number of inner sketch steps therefore leaves the sampled data unchanged.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const SAMPLE_STREAM: u64 = 0;
const SKETCH_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;
const AUX_STREAM: u64 = 3;

#[derive(Debug, Clone)]
pub struct RunRngs {
    pub sample: Rng,
    pub sketch: Rng,
    pub step: Rng,
}

impl RunRngs {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            sample: stream(seed, SAMPLE_STREAM),
            sketch: stream(seed, SKETCH_STREAM),
            step: stream(seed, STEP_STREAM),
        }
    }
}

/// A ChaCha generator on a given stream of `seed`.
pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Generator for auxiliary Monte-Carlo work (oracles, tests).
pub fn aux(seed: u64) -> Rng {
    stream(seed, AUX_STREAM)
}

/// Seed of replication `rep` under `base`.
pub fn replication_seed(base: u64, rep: u64) -> u64 {
    base ^ rep
}
