//! Remote execution level: wire protocol, broker boundary, simulated vehicle
//! backends and the fleet that drives them.

pub mod backend;
pub mod broker;
pub mod fleet;
#[cfg(feature = "mqtt")]
pub mod mqtt;
pub mod trace;
pub mod wire;
