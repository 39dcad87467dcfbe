//! Differentiable anisotropic Stokes flow on regular grids and a
//! topology-optimization loop built on it.
//!
//! The pipeline is `DesignField -> MaterialTensors -> StokesSystem -> FlowState`,
//! with adjoint gradients flowing back along the same path.

#![allow(clippy::needless_range_loop)]

pub mod assembly;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod gradients;
pub mod grid;
pub mod linalg;
pub mod material;
pub mod mma;
pub mod objective;
pub mod optimizer;
pub mod output;
pub mod solver;
pub mod sparse;
pub mod task;

pub use error::{Error, Result};
pub use exec::Exec;
pub use grid::{Grid, GridSpec, QuadratureRule};
pub use material::{DesignField, MaterialParams, MaterialTensors};
