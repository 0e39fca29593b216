//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived from
//! the run seed, so enabling or disabling one component (say, the guided
//! module's weight init) never shifts the draws seen by another.

use rand::Rng as _;
use rand::SeedableRng;

pub use rand_chacha::ChaCha8Rng as Rng;

/// Stream tags. The numeric values are part of the reproducibility contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Supernet / discrete-network weight initialization.
    NetInit = 1,
    /// Guided-module weight initialization.
    GgmInit = 2,
    /// Gumbel noise drawn each search step.
    Gumbel = 3,
    /// Dataset synthesis.
    Data = 4,
    /// Batch sampling and augmentation.
    Batch = 5,
    /// Random genotype sampling.
    Sample = 6,
    /// Finetuning (init + shuffling), further split per run index.
    Finetune = 7,
}

/// An independent stream for `(seed, stream)`.
pub fn stream(seed: u64, s: Stream) -> Rng {
    substream(seed, s, 0)
}

/// An independent stream for `(seed, stream, index)`; used where several
/// runs of the same kind must each be self-contained (e.g. parallel
/// finetunes of sampled genotypes).
pub fn substream(seed: u64, s: Stream, index: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(((s as u64) << 32) | index);
    rng
}

/// Uniform draw in the closed-open interval `[lo, hi)`.
pub fn uniform(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Uniform integer in `[0, n)`.
pub fn below(rng: &mut Rng, n: usize) -> usize {
    rng.random_range(0..n)
}
