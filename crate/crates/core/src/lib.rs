//! Generation-curve analysis for diffusion models.
//!
//! The numerical core is generic over the scalar type; the aliases below fix
//! the working precision used by the command-line harness.

pub mod curve;
pub mod error;
pub mod geometry;
pub mod gmm;
pub mod harness;
pub mod matching;
pub mod model;
pub mod nn;
pub mod real;
pub mod rng;
pub mod schedule;

pub use error::{Error, Result};
pub use gmm::GmmSpec;
pub use model::{Model, NoisePredictor, ZeroModel};
pub use nn::{Head, NetMode, ScoreNetwork};
pub use real::Real;
pub use schedule::{make_schedule, Sweep, NoiseSchedule, Trajectory};

/// Single-precision schedule used with trained networks.
pub type Schedule = NoiseSchedule<f32>;
/// Single-precision network.
pub type Network = ScoreNetwork<f32>;
/// Double-precision analytic mixture.
pub type Gmm = GmmSpec<f64>;
