//! Seeded random streams.
//!
//! Every run derives all of its randomness from one user seed; each consumer
//! draws from its own named ChaCha stream so that, e.g., changing the number of
//! training steps never perturbs the dataset.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::real::{lit, Real};

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Dataset,
    Init,
    Train,
    Match,
    Sample,
    Experiment,
    /// Held-out data, disjoint from [`Stream::Dataset`].
    Holdout,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Dataset => 1,
            Stream::Init => 2,
            Stream::Train => 3,
            Stream::Match => 4,
            Stream::Sample => 5,
            Stream::Experiment => 6,
            Stream::Holdout => 7,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

pub fn normal_vec<S: Real>(rng: &mut Rng, n: usize) -> Vec<S> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            lit(z)
        })
        .collect()
}
