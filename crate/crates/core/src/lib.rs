pub mod annotator;
pub mod attrib;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pass;
pub mod projection;
pub mod raster;
pub mod real;
pub mod trainer;

pub use error::{Error, Result};
pub use real::{DType, Real};
