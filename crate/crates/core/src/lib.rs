//! Mass-conservative multiscale pressure solver and two-phase transport on
//! the unit square.

pub mod downscale;
pub mod error;
pub mod fem;
pub mod fvregion;
pub mod field;
pub mod mesh;
pub mod metrics;
pub mod msbasis;
pub mod saddle;
pub mod sim;
pub mod sparse;
pub mod transport;

pub use error::{Error, Result};
