//! Experiment harness for the FiLM U-Net denoiser: config files, the
//! train/sweep/denoise/compare commands, CSV reports and SVG plots.

pub mod commands;
pub mod config;
pub mod report;
pub mod svg;

pub use config::{Command, ExperimentConfig, Overrides};
