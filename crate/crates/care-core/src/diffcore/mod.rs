//! Dense-matrix reverse-mode automatic differentiation.
//!
//! Everything downstream (encoders, pooling, refinement, losses) is built
//! from the operator set in [`tape`]; [`params`] owns the trainable weights
//! between steps, [`adam`] updates them, and [`gradcheck`] verifies backward
//! rules against finite differences.

pub mod adam;
pub mod gradcheck;
pub mod matrix;
pub mod params;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{check_gradients, GradCheckOutcome, GradCheckSettings};
pub use matrix::Matrix;
pub use params::{ParamId, ParamStore};
pub use tape::{Reduce, Tape, Tensor, COSINE_EPS};
