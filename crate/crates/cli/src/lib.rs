//! Reproducible runs of the headgrow pipeline: dataset synthesis,
//! reconstruction and scoring, each writing its effective configuration.

pub mod commands;
pub mod config;
