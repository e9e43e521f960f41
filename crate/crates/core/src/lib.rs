//! T-Net and Stack T-Net single-image dehazing.
//!
//! The crate carries its own small tensor and reverse-mode autodiff engine
//! ([`tensor`], [`autograd`]) so the same network code runs in `f32` for
//! training and in `f64` for finite-difference verification.

pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod haze;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod stack;
pub mod tensor;
pub mod tnet;
pub mod train;

pub use error::{Error, Result};
