//! Distributed model predictive control for multiagent point-to-point
//! transitions with on-demand, soft-constrained collision avoidance.

// `!(x > 0.0)` is used deliberately so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod model;
pub mod assembly;
pub mod qp;
pub mod postprocess;
pub mod engine;
pub mod scenario;
pub mod metrics;
pub mod trajectory_csv;
