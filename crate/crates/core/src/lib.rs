//! Backward characteristics, reflection Jacobians and weighted estimates for
//! specular billiards in strictly convex domains under an external field.

pub mod characteristics;
pub mod cli;
pub mod error;
pub mod field;
pub mod frames;
pub mod geometry;
pub mod jacobians;
pub mod linalg;
pub mod transport;
pub mod weight;

pub use error::{Error, Result};
