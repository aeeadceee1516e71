//! Class-aware representation refinement for graph classification.
//!
//! The crate trains graph neural networks whose graph-level representations
//! are pulled toward learned per-class representatives, and ships the
//! surrounding apparatus: a dense-matrix autodiff engine, a TUDataset-format
//! reader, subgraph selection, the refinement head and its losses, a
//! cross-validated trainer, embedding-separability metrics, and an exact
//! integer model of the capacity bound that motivates the architecture.

pub mod cli;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod graphio;
pub mod losses;
pub mod refiner;
pub mod selector;
pub mod sepmetrics;
pub mod trainer;
pub mod vcbound;

pub use error::{CareError, Result};
