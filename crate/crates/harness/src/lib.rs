//! Configuration, data generation and experiment drivers behind the
//! `kronprior` command-line tool.

pub mod config;
pub mod datagen;
pub mod error;
pub mod experiments;
pub mod idx;

pub use error::{HarnessError, Result};
