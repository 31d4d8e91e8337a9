//! Experiment harness around `planrl_core`: configuration, dataset and
//! model generation, training sweeps, versioned metrics files and plots.

pub mod cli;
pub mod config;
pub mod error;
pub mod fsio;
pub mod metrics;
pub mod pipeline;
pub mod plot;

pub use error::{HarnessError, Result};
