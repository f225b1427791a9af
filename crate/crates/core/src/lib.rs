//! Adaptive control of partially observed linear systems from closed-loop data.

pub mod adapton;
pub mod dfc;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod registry;
pub mod rng;
pub mod simulator;
pub mod system_model;
pub mod sysid;

pub use error::{Error, Result};
