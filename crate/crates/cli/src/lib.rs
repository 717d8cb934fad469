//! File formats and commands around the `care-core` extraction model.

pub mod archive;
pub mod checkpoint;
pub mod commands;
pub mod corpus;
pub mod error;

pub use error::{Failure, Result};
