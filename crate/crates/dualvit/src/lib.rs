//! File formats, configuration loading and reporting on top of `dualvit-core`.
//!
//! - [`dataset`]: the packed `DVDS` image dataset format.
//! - [`checkpoint`]: the `DVCP` parameter archive.
//! - [`config`]: JSON model configs and `key=value` overrides.
//! - [`describe`]: per-stage architecture summaries.

mod bytes;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod describe;
mod error;

pub use bytes::FormatError;
pub use error::{Error, Result};
