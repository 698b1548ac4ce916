//! Seeded generators, one independent stream per purpose.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purpose {
    Init,
    Sampling,
    EvalSplit,
    EvalNegatives,
    Synth,
}

impl Purpose {
    fn stream(self) -> u64 {
        match self {
            Purpose::Init => 1,
            Purpose::Sampling => 2,
            Purpose::EvalSplit => 3,
            Purpose::EvalNegatives => 4,
            Purpose::Synth => 5,
        }
    }
}

/// Generator for `purpose` under the run seed. Streams of different purposes
/// never overlap, so each stage is reproducible on its own.
pub fn stream_rng(seed: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose.stream());
    rng
}
