//! Minimal dense/convolutional layer kit with explicit backward passes.
//!
//! Layers are immutable during forward/backward; backward functions return
//! gradient structs so batch-parallel callers can reduce partial gradients
//! in a fixed order (keeping training bitwise reproducible for a given seed).

pub mod adam;
pub mod batchnorm;
pub mod conv;
pub mod init;
pub mod linear;
pub mod ops;

pub use adam::Adam;
pub use batchnorm::{BatchNorm2d, BatchNorm2dGrad};
pub use conv::{AdaptiveAvgPool, Conv2d, Conv2dGrad, MaxPool2};
pub use linear::{Linear, LinearGrad};
