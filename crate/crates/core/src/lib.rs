//! Attention-based graph convolution networks (AGCN) for point clouds.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: farthest point sampling, k-nearest-neighbour search,
//!   local grouping and inverse-distance-weighted interpolation.
//! - [`diffcore`]: a small dense tensor tape with hand-written backward
//!   passes, parameter storage, Adam, checkpoints and a finite-difference
//!   gradient checker.
//! - [`agcn`]: local structure features, point attention layers, the global
//!   point graph, and the classification / segmentation networks.
//! - [`training`]: augmentation, learning-rate schedule, the fit loop and
//!   evaluation metrics.
//! - [`dataio`]: point-cloud files, dataset manifests and synthetic shape
//!   generators.
//! - [`experiments`]: gradient-check suites, timing benchmarks, ablations
//!   and robustness sweeps shared by the CLI and the acceptance tests.

pub mod agcn;
pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod training;

mod kv;
mod seeds;

pub use error::{Error, Result};
