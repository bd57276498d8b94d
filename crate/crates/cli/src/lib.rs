//! Synthetic 4D point-cloud videos, training, evaluation and timing on top
//! of `mink-core`.

pub mod augment;
pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod inspect;
pub mod model;
pub mod scene;
pub mod train;

pub use config::RunConfig;
pub use error::{CliError, Result};
