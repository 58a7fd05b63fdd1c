//! Simulation, learned surrogates and policy training for a small active
//! distribution network.

pub mod bench;
pub mod dataset;
pub mod env;
pub mod error;
pub mod grid;
pub mod nn;
pub mod pinn;
pub mod powerflow;
pub mod projection;
pub mod rl;
pub mod terminal;

pub use error::{Error, Result};
