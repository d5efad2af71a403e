//! Digital twin of a differential-drive rover with a 6-DoF arm and a
//! pan/tilt camera gimbal.
//!
//! The crate is organised bottom-up: [`model`] and [`kinematics`] hold pure
//! types and functions, [`physics`] steps the world, [`bus`] moves messages
//! with injected latency, and [`sim::Session`] ties them into the tick loop.
//! [`emulator`] perturbs a session to stand in for hardware, [`fidelity`]
//! measures and calibrates the gap, and [`recorder`] / [`server`] handle
//! persistence and networking.

pub mod bus;
pub mod config;
pub mod emulator;
pub mod error;
pub mod fidelity;
pub mod kinematics;
pub mod model;
pub mod physics;
pub mod recorder;
pub mod scenario;
pub mod server;
pub mod sim;
pub mod units;

pub use config::{TwinConfig, load_config};
pub use error::{Error, Result};
pub use sim::Session;
