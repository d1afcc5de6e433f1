//! Small-area census updating with structure preserving estimation.

pub mod cli;
pub mod error;
pub mod ingest;
pub mod ipf;
pub mod loglinear;
pub mod margins;
pub mod mpi;
pub mod numeric;
pub mod sampling;
pub mod scenario;
pub mod tabulate;
pub mod uncertainty;
pub mod update;
pub mod validation;

pub use error::{Error, Result};
