//! Adaptive structural learning of feedforward networks.
//!
//! Networks are grown one subnetwork at a time by block coordinate descent
//! on a complexity-regularized convex surrogate objective. Each round
//! proposes candidate subnetworks (by stochastic gradient training or by a
//! closed-form dual-norm construction), solves for their output weights,
//! and keeps the candidate that lowers the objective most.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod kernel;
pub mod loss;
pub mod network;
pub mod baselines;
pub mod complexity;
pub mod driver;
pub mod harness;
pub mod solver;
pub mod weaklearner;

pub use error::{Error, Result};
