//! Deterministic dense linear algebra, seeded randomness, and
//! finite-difference gradient probes.
//!
//! Everything downstream (adapters, regularizers, the aggregation decoder,
//! the toy diffusion model) builds on this module, and the reproducibility
//! guarantees of the whole crate reduce to the fixed reduction orders and
//! pinned RNG algorithm defined here.

mod eigen;
mod gradcheck;
mod matrix;
mod rng;

pub use eigen::{singular_values, symmetric_eigenvalues};
pub use gradcheck::{finite_diff_grad, max_relative_error, relative_error, DEFAULT_STEP};
pub use matrix::{cosine_sim, dot, norm, softmax_rows, Matrix};
pub use rng::{gaussian, SeededRng};
