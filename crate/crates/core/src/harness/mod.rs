//! Datasets, metrics, persistence, configuration and the command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod experiment;
pub mod metrics;
