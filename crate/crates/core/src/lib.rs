//! Optimal stopping for multidimensional diffusions: obstacle-problem solver,
//! free-boundary extraction, pathwise Monte Carlo representations of the value
//! function and its derivatives, and checks of the structural conditions under
//! which the stopping boundary is Lipschitz.
//!
//! The crate is `no_std` (with `alloc`). Enabling the `std` feature evaluates
//! Monte Carlo paths in parallel; results are bit-identical either way.

#![no_std]
// NaN-rejecting comparisons are written as `!(a < b)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod boundary;
pub mod conditions;
pub mod error;
pub mod examples;
pub mod flow;
pub mod math;
mod par;
pub mod pde;
pub mod problem;
pub mod represent;
pub mod rng;

pub use error::{Error, Result};
pub use problem::{evaluate_m_n, gamma_curve, GeneratorImage, Horizon, Orientation, Payoff, Piece, ProblemSpec};
