//! Dense reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only arena of [`Value`]s. Creation order is a valid
//! topological order, so [`Graph::backward`] walks the arena from the seed down
//! to index zero. Leaves (values without an op record) accumulate gradient across
//! repeated backward calls; intermediate gradients are scratch buffers that live
//! only for one call.

pub mod gradcheck;
mod graph;
mod ops;

pub use graph::{Graph, Value, ValueId};
