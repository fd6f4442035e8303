//! Scenario configuration and mission runner behind the `ipp` binary.

pub mod config;
pub mod runner;
