//! Physics-informed operator learning for `∂τφ − ∂²ₓα(φ) = g` with zero
//! initial and boundary data, plus a finite-difference reference solver.

pub mod cli;
pub mod deeponet;
pub mod error;
pub mod fdm;
pub mod gp;
pub mod grid_csv;
pub mod nnet;
pub mod physics;
pub mod pipeline;

pub use error::{Error, Result};
