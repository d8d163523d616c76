//! Experiment harness around the core library: configuration, the seeded
//! run pipeline, results CSVs, and SVG plots.

pub mod config;
pub mod plot;
pub mod records;
pub mod runner;
