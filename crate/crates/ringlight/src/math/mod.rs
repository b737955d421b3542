//! Matrices, deterministic counter-based sampling, and normal-distribution
//! special functions.

pub mod io;
pub mod matrix;
pub mod normal;
pub mod rng;

pub use matrix::{matmul, rel_frobenius, Matrix};
pub use normal::{std_normal_cdf, std_normal_quantile};
pub use rng::{labels, SeedContext, Stream};
