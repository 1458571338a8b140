//! Desk-scale laboratory for the wave-equation inverse source problem:
//! forward finite-difference solves, Carleman-weighted energy inequalities
//! with terminal-time terms, and regularized reconstruction of the spatial
//! source factor from Neumann boundary data.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod forward;
pub mod geometry;
pub mod grid;
pub mod inverse;
pub mod verifier;
pub mod weights;

pub use error::{LabError, Result};
