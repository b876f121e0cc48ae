//! Deterministic tensor/autodiff engine for the fcd pipeline.
//!
//! Pure-Rust CPU kernels, a recording tape with graph-valued gradients
//! (higher-order differentiation works), Adam, a seeded PRNG, and a
//! finite-difference checker. Nothing here knows about clouds; it is the
//! numeric substrate the pipeline crates build on.

pub mod check;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;

pub use graph::{Gradients, Graph, NodeId};
pub use optim::Adam;
pub use params::{Bound, ParamEntry, ParamId, ParamSet};
pub use rng::Rng;
