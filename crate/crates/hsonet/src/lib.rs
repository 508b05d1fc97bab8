//! Files, training orchestration and the command line around `hsonet-core`.
//!
//! - [`config`]: run configuration with TOML files and layered overrides.
//! - [`io`]: PNG rasters and the `A/B/label/hardness` dataset layout.
//! - [`checkpoint`]: the versioned `HSON` checkpoint container.
//! - [`trainer`]: training loop, evaluation with a per-hardness breakdown,
//!   and prediction.
//! - [`cli`]: the `hsonet` command.

pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod io;
pub mod trainer;

pub use error::{Error, Result};
