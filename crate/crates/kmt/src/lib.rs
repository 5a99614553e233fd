//! Experiment harness: config loading, run manifests, pipeline stages,
//! sweeps, and SVG chart rendering, driven by the `kmt` binary.

pub mod chart;
pub mod config;
pub mod manifest;
pub mod stages;
pub mod sweep;
