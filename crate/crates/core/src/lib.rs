//! Dual-pathway vision transformer: a pixel pathway that refines high-resolution
//! tokens against a small set of learned semantic tokens, and a semantic pathway
//! that summarizes the pixels into those tokens. Later stages merge both token
//! sets and run joint self-attention.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, configuration files
//! and the command-line tool live in the `dualvit` crate.

#![no_std]

extern crate alloc;

pub mod blocks;
pub mod complexity;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{AblationVariant, BlockKind, DualVit, ModelConfig, Preset, StageSpec};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
