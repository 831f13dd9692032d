//! File formats, benchmarks and the command-line interface around
//! [`deop_core`].

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod pnm;
pub mod report;

pub use error::{Error, Result};
