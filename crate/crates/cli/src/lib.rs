//! Experiment runner: training, evaluation, sweeps, the cliff gallery and
//! row verification.

pub mod commands;
pub mod config;
pub mod gallery;
pub mod plot;
pub mod sweep;
