//! Configuration, datasets, experiment runs and reports for `mixprec-core`.

pub mod config;
pub mod data;
pub mod experiment;
pub mod report;
