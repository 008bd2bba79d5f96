//! The noise-prediction interface shared by learned networks and the analytic
//! mixture backend.

use crate::error::{check_len, Result};
use crate::gmm::GmmSpec;
use crate::nn::ScoreNetwork;
use crate::real::Real;
use crate::schedule::NoiseSchedule;

/// Anything that predicts the noise component `eps(x, t)` of a noised state.
pub trait NoisePredictor<S: Real> {
    /// Ambient dimension of the states this model accepts.
    fn dim(&self) -> usize;

    fn predict_noise(&self, schedule: &NoiseSchedule<S>, x: &[S], t: usize) -> Result<Vec<S>>;
}

/// Predicts zero noise everywhere; DDIM then reduces to pure rescaling.
#[derive(Debug, Clone, Copy)]
pub struct ZeroModel {
    dim: usize,
}

impl ZeroModel {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl<S: Real> NoisePredictor<S> for ZeroModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_noise(&self, _: &NoiseSchedule<S>, x: &[S], _: usize) -> Result<Vec<S>> {
        check_len(self.dim, x.len())?;
        Ok(vec![S::zero(); x.len()])
    }
}

/// A score model: a trained network or the exact mixture backend.
#[derive(Debug, Clone)]
pub enum Model<S> {
    Learned(ScoreNetwork<S>),
    Analytic(GmmSpec<S>),
}

impl<S: Real> Model<S> {
    pub fn as_learned(&self) -> Option<&ScoreNetwork<S>> {
        match self {
            Model::Learned(n) => Some(n),
            Model::Analytic(_) => None,
        }
    }

    pub fn is_analytic(&self) -> bool {
        matches!(self, Model::Analytic(_))
    }

    /// Stable identity of the model's parameters, used for cache keys.
    pub fn digest(&self) -> u64 {
        match self {
            Model::Learned(n) => n.digest(),
            Model::Analytic(g) => g.digest(),
        }
    }
}

impl<S: Real> NoisePredictor<S> for Model<S> {
    fn dim(&self) -> usize {
        match self {
            Model::Learned(n) => NoisePredictor::<S>::dim(n),
            Model::Analytic(g) => NoisePredictor::<S>::dim(g),
        }
    }

    fn predict_noise(&self, schedule: &NoiseSchedule<S>, x: &[S], t: usize) -> Result<Vec<S>> {
        match self {
            Model::Learned(n) => n.predict_noise(schedule, x, t),
            Model::Analytic(g) => g.predict_noise(schedule, x, t),
        }
    }
}

/// FNV-1a over a byte stream; cheap content digests for cache keys.
pub(crate) fn fnv1a(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub(crate) fn digest_reals<S: Real>(xs: &[S]) -> u64 {
    fnv1a(
        xs.iter()
            .flat_map(|&x| crate::real::to_f64(x).to_bits().to_le_bytes()),
    )
}
