//! Experiment orchestration for `scoregeom`: data generation, training,
//! sampling, analysis, figures and the oracle self-test.

pub mod checks;
pub mod cli;
pub mod commands;
pub mod config;
pub mod io;
pub mod report;
pub mod svg;

pub use config::ExperimentConfig;
