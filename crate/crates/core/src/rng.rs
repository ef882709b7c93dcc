//! Random streams used by workers, samplers and the simulator.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};

/// The stream type used everywhere a deterministic, seedable generator is
/// needed.
pub type Stream = rand_chacha::ChaCha8Rng;

pub fn stream(seed: u64) -> Stream {
    Stream::seed_from_u64(seed)
}

/// Private stream of worker `worker`; streams are seeded `base + worker`.
pub fn worker_stream(base: u64, worker: usize) -> Stream {
    stream(base.wrapping_add(worker as u64))
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

pub fn fill_standard_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = standard_normal(rng);
    }
}
