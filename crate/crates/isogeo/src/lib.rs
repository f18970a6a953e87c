//! Experiment harness, file formats and command-line driver for
//! `isogeo-core`.

// `!(x > 0.0)` rejects NaN together with nonpositive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod emit;
pub mod error;
pub mod experiments;
pub mod formats;
pub mod parallel;
pub mod suite;
pub mod table;

pub use config::{ExperimentConfig, ExperimentKind};
pub use error::{HarnessError, Result};
pub use table::ResultTable;
