//! Graph neural tangent kernels and finite-width graph networks.
//!
//! The crate computes single-layer graph kernels in closed form and by Monte
//! Carlo, runs the multi-level node kernel recursion, trains one-hidden-layer
//! graph networks by gradient descent, and compares the trained predictors
//! with kernel regression as the width grows.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod io;
pub mod kernel;
pub mod lab;
pub mod multinet;
pub mod regression;
pub mod rng;
pub mod spectral;

pub use error::{LabError, Result};
