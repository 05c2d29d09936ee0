//! Experiment runner for GRPO and GRPO-λ: configuration files, run
//! directories, multi-seed comparisons, oracle suites and SVG plots.

pub mod cli;
pub mod compare;
pub mod config;
pub mod run;
pub mod svg;
pub mod verify;
