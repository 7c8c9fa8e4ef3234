//! Simulation harness, loopback handshake and operator CLI support for the
//! scheduled-signing CA.

pub mod audit;
pub mod config;
pub mod handshake;
pub mod sim;
