//! Kronecker fractal expansion of sparse rating matrices.

pub mod analytics;
pub mod error;
pub mod expander;
pub mod io;
pub mod matrix;
pub mod reducer;
pub mod spectra;
pub mod synthetic;

pub use error::{Error, Result};
