//! Numerical core for two-stage multi-scene person re-identification.
//!
//! A scene-prompted vision transformer (the bank) is trained with scene labels;
//! a versatile-prompt branch is then distilled from it and needs no scene
//! labels at inference. Everything here is allocation-only (`no_std` + `alloc`):
//! the tape-based autodiff, model, objectives, multi-scene augmentation,
//! synthetic scene rendering, PK sampling and retrieval metrics.
#![no_std]

extern crate alloc;

pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod loss;
pub mod model;
pub mod mpda;
pub mod optim;
pub mod params;
pub mod scene;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::Image;
pub use params::ParamSet;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
