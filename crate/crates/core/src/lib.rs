//! Core of the HSONet change-detection stack.
//!
//! Everything in this crate is pure computation over in-memory buffers: a
//! small reverse-mode autodiff engine, the Siamese network (variant-FPN
//! encoder, foreground-scene relation gating, dual-branch decoder), the
//! equilibrium-optimization loss, confusion metrics and the synthetic
//! bitemporal data generator. File formats, training orchestration and the
//! command line live in the `hsonet` crate.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod decoder;
pub mod encoder;
mod error;
pub mod fs_relation;
pub mod graph;
mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod raster;
mod scalar;
pub mod synthdata;
mod tensor;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use model::{HsoNet, ModelConfig};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
