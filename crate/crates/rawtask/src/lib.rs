//! Std front end for `rawtask-core`: run configuration, dataset and
//! checkpoint files, metric reports and the `rawtask` command line.

pub use rawtask_core as core;

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;
