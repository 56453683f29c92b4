//! Config-driven experiment runner for the `bsvie` solver library.

pub mod config;
pub mod expr;
pub mod presets;
pub mod runner;
pub mod study;
