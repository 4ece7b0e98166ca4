//! Dense row-major matrices and the seeded random source.

mod matrix;
mod rng;

pub(crate) use matrix::dot as matrix_dot;
pub use matrix::Matrix;
pub use rng::{dirichlet_sample, Rng};
