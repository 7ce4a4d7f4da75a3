//! Command-line front end: dataset generation, training, evaluation,
//! report comparison and the standalone weight-solver demo.

pub mod commands;
pub mod config;
