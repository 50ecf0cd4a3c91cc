//! Meta-learning of loss functions for physics-informed neural networks.
//!
//! The crate trains small fully-connected networks to satisfy parametrized
//! PDE constraints (collocation residuals, boundary/initial conditions, and
//! optionally observed solution data), while an *outer* optimization loop
//! learns the pointwise loss function used by that inner training. Learned
//! loss parametrizations include an adaptive robust-loss family, a free-form
//! feed-forward loss network, and a likelihood-calibrated adaptive variant
//! updated online alongside the model.
//!
//! Module map:
//! - [`autodiff`]: scalar-graph reverse-mode AD whose backward pass can emit
//!   graph nodes (differentiable derivatives, nested three deep).
//! - [`network`]: multilayer perceptrons built on the graph, plus flat
//!   parameter-vector plumbing.
//! - [`losses`]: the learnable and fixed pointwise losses, loss-function
//!   sanity conditions, and the theory-motivated penalty.
//! - [`tasks`]: parametrized PDE/regression task families with reference
//!   solutions and objective builders.
//! - [`metalearn`]: the bi-level meta-training loop (unrolled inner
//!   optimization, outer updates, snapshots, metrics).
//! - [`metatest`]: frozen-loss evaluation on fresh tasks, candidate zoos,
//!   and the comparison sweeps.

pub mod autodiff;
pub mod losses;
pub mod metalearn;
pub mod metatest;
pub mod network;
pub mod numerics;
pub mod tasks;
