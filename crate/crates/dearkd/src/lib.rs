//! Experiment harness around `dearkd-core`: configuration, datasets, the
//! `DKDC` checkpoint container, CSV logs, PNG export and the training,
//! inversion and evaluation entry points used by the `dearkd` binary.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod images;
pub mod invert;
pub mod logs;
pub mod train;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
