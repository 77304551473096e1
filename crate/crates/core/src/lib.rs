//! Stochastic bilevel learning of convex regularizers with inexact
//! hypergradients and adaptive accuracy schedules.

pub mod checks;
pub mod conv;
pub mod cost;
pub mod error;
pub mod hypergradient;
pub mod image;
pub mod linear_solver;
pub mod lower_solver;
pub mod optimizers;
pub mod problems;
pub mod rate_harness;
pub mod regularizers;
pub mod schedules;
pub mod vecops;

pub use cost::CostCounter;
pub use error::{Error, Result};
pub use image::{Image, Shape};
pub use regularizers::{Regularizer, ThetaParams};
pub use schedules::{Schedule, ScheduleKind};

/// Seedable generator used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;
