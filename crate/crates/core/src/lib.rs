//! Penalized obstacle-problem solvers, skeleton equations, and
//! large-deviation rate estimation on a one-dimensional box.

pub mod bsde;
pub mod error;
pub mod grid;
pub mod harness;
pub mod ldp;
pub mod noise;
pub mod problem;
pub mod skeleton;
pub mod spde;
pub mod stats;
mod tridiag;

pub use error::{Error, Result};
pub use grid::{Field, Grid, TimeMesh, Trajectory};
pub use noise::{sample_noise, NoisePath};
pub use problem::{Family, FamilyParams, ProblemSpec};
pub use skeleton::{Control, PenalizedSolution, PenaltySchedule, SkeletonSolution};
