//! Linear classification with logistic loss under Mixup and masking
//! augmentations on two-class Gaussian data.

pub mod error;
pub mod expected;
pub mod harness;
pub mod losses;
pub mod maxmargin;
pub mod minimize;
pub mod mlp2d;
pub mod model;
pub mod quadrature;
pub mod verify;

pub use error::{Error, Result};
