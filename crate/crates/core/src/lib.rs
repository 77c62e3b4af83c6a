//! Multi-scale visual-language fusion, built from scratch.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] / [`ops`] / [`tape`]: dense f64 tensors, eager matrix
//!   operations, and a recording tape with hand-written backward rules.
//! - [`gradcheck`]: central finite differences, the oracle every backward
//!   rule is verified against.
//! - [`pyramid`]: a toy multi-scale image encoder plus per-scale projectors.
//! - [`fusion`]: region-restricted cross-attention from a learnable query
//!   grid onto the scale pyramid, and the channel-concat baseline.
//! - [`decoder`]: a small causal decoder with visual tokens prepended,
//!   low-rank adapters, and per-layer visual re-alignment.
//! - [`model`]: the assembled pipeline.
//! - [`data`] / [`train`]: synthetic scene captions and the two-stage
//!   training loop.
//!
//! Everything is deterministic given a seed and runs single-threaded.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(not(any(feature = "std", feature = "libm")))]
compile_error!("vlfuse-core needs either the `std` or the `libm` feature");

pub mod data;
pub mod decoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod math;
pub mod model;
pub mod ops;
pub mod params;
pub mod pe;
pub mod pyramid;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
