//! Selective mutual attention and contrast (SMAC) for RGB-D salient object
//! detection at desk scale.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`tape`], [`ops`], [`nn`], [`gradcheck`]: a small dense
//!   tensor engine with reverse-mode differentiation.
//! - [`attention`]: non-local, mutual, contrast and selective attention blocks.
//! - [`network`]: the two-stream encoder / DenseASPP / fusion / decoder model.
//! - [`trainer`]: preprocessing, augmentation and SGD with momentum.
//! - [`metrics`] and [`stats`]: evaluation measures and dataset profiling.
//! - [`io`], [`config`], [`checkpoint`]: file formats used by the CLI.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod ops;
pub mod param;
pub mod stats;
pub mod suite;
pub mod synthetic;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
