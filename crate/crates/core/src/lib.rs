//! Desk-scale implementation of a sigmoid spatial-attention module for
//! hierarchical vision backbones, together with everything needed to train
//! and inspect it: a minimal reverse-mode autodiff tensor engine, a surrogate
//! four-stage backbone, the composite cross-entropy + L1-sparsity loss with a
//! Lion optimizer, a deterministic synthetic fine-grained dataset with
//! ground-truth discriminative patches, and attention-map visualization math
//! (bilinear upsampling, top-fraction thresholding, boundary tracing,
//! pointing-game / IoU metrics).
//!
//! The crate is `no_std` + `alloc`: it performs no IO and spawns no threads.
//! File formats, the CLI, and the training loop live in the companion
//! `loupe-cli` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod loupe;
pub mod optim;
pub mod params;
pub mod rng;
pub mod viz;

pub use error::{CoreError, Result};
pub use graph::{Graph, L1Mode, Real, Shape, Var};
pub use params::{Param, ParamSet};

/// Floating-point width shared by every tensor in one graph.
///
/// The type parameter on [`Graph`] enforces the "one mode per graph"
/// invariant statically; this enum exists for run configuration and
/// reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Single => "single",
            Precision::Double => "double",
        }
    }
}
