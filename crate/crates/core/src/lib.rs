//! Core algorithms for teamed-classifier vehicle identification.
//!
//! Everything in this crate is pure computation over in-memory data: the
//! residual embedding backbone with its attention modules, the metric
//! learning objectives, retrieval and clustering metrics, the supervised
//! sparse gating layer and the training loop. File formats, dataset
//! ingestion and the command line live in the `glamor` companion crate.
//!
//! The crate is `no_std` (with `alloc`) unless the `std` feature is enabled,
//! which only switches the matrix kernels to runtime CPU feature detection.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod attention;
pub mod datamodel;
pub mod error;
pub mod losses;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod teaming;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
