pub mod cloud;
pub mod error;
pub mod geometry;
pub mod localization;
pub mod phase;
pub mod pipeline;
pub mod raster;
pub mod registration;
pub mod simulator;

pub use error::{Error, ErrorKind, Result};
