//! Deterministic federated-learning simulator and batch-size planning toolkit.
//!
//! The crate simulates synchronous (BSP) and periodic-averaging (FedAvg)
//! training of small dense networks over partitioned synthetic datasets, and
//! models the parallel performance side of batch-size selection: per-step cost,
//! training memory, and the largest/fastest usable batch on a memory budget.
//!
//! Everything is seeded: a fixed configuration reproduces the same metrics
//! byte for byte.
//!
//! Module map:
//! - [`nn`]: dense network core. Init, forward loss, exact mean-gradient
//!   backprop, SGD step.
//! - [`data`]: synthetic Gaussian-blob datasets, IID and label-skew client
//!   partitioning, CSV import.
//! - [`fed`]: the federated execution engine and its metrics log.
//! - [`gradscale`]: gradient-norm tracking, critical-phase detection, the
//!   step-function gradient scaler, and gradient-noise estimation.
//! - [`perf`]: linear cost/memory fits, the step-time and epoch-time model,
//!   and the batch-size planner.
//! - [`compress`]: top-k gradient sparsification and the sparse/dense
//!   residual decomposition.

pub mod compress;
pub mod data;
pub mod error;
pub mod fed;
pub mod gradscale;
pub mod nn;
pub mod perf;

pub use error::{Error, Result};
