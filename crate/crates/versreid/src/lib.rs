//! File formats, run modes and the command-line front end of the desk-scale
//! multi-scene ReID pipeline. The numerical work lives in `versreid-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod ppm;
pub mod report;

pub use error::{Error, Result};
