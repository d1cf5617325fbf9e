//! Window-level graph relation modules and boundary-aware attention for
//! semantic segmentation, built on a small `f64` reverse-mode tensor library.
//!
//! Layout:
//! - [`tensor`], [`ops`], [`tape`]: dense tensors, kernels, autodiff
//! - [`window`]: window partition of feature maps
//! - [`graph`]: relation matrices, threshold sparsification, graph convolution
//! - [`relation`]: global/local relation modules and their fusion
//! - [`boundary`]: boundary-aware attention head
//! - [`model`], [`data`], [`train`], [`metrics`], [`checkpoint`]: toy
//!   segmentation pipeline
//! - [`config`], [`experiment`], [`gradcheck`], [`bench`]: what the command
//!   line drives

pub mod bench;
pub mod boundary;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod relation;
pub mod sparse;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod window;

pub use error::{Error, Result};
pub use tape::{Grads, Tape, Var};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};
