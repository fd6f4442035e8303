//! Informative path planning for fleets of surface vehicles on grid graphs.

pub mod env;
pub mod field;
pub mod fleet;
pub mod gp;
pub mod graph;
pub mod mission;
pub mod planner;
