//! Core library for studying how batch normalization and related activation
//! normalization schemes reshape the optimization landscape of small dense
//! networks.
//!
//! The pieces fit together as follows:
//!
//! - [`tensor`] / [`rng`]: dense f64 tensors and seeded, splittable random
//!   streams.
//! - [`graph`]: a small reverse-mode autodiff core sufficient for dense
//!   layers, normalization layers, and second-order probes.
//! - [`fdiff`]: central-difference gradient and Hessian-vector oracles,
//!   independent of the reverse-mode path.
//! - [`gradcheck`]: randomized per-op verification of the reverse-mode
//!   gradients against those oracles.
//! - [`norm`]: closed-form batch normalization (forward, backward, input
//!   Jacobian), per-step activation noise, and lp normalization, plus the
//!   strategy registry that builds each scheme into a graph.
//! - [`network`]: layer specs, parameter state, deep-linear and MLP builders,
//!   and synthetic datasets.
//! - [`train`]: simultaneous, sequential (per-layer), and reduced-rate
//!   gradient descent with per-step instrumentation hooks.
//! - [`probe`]: gradient-shift measurement, landscape probes along the
//!   gradient direction, and activation-moment capture.
//! - [`theory`]: randomized numerical verification of the closed-form
//!   gradient/curvature identities and bounds for batch-normalized layers.

// `!(x >= 0.0)`-style comparisons deliberately reject NaN alongside the
// out-of-range values; index-based loops mirror the per-unit/per-sample
// subscripts of the math they implement.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]
#![allow(clippy::manual_is_multiple_of)]

pub mod alloc_tuning;
pub mod fdiff;
pub mod gradcheck;
pub mod graph;
pub mod norm;
pub mod network;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod train;
