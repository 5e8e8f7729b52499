//! Desk-scale federated unlearning simulator.
//!
//! The pipeline trains a small dense network with federated averaging,
//! then removes one client's contribution in two stages: an unlearning
//! stage that follows the steepest loss-increasing direction for the
//! departing client inside the null space of the remaining clients'
//! gradients, and a post-training stage that restores utility while
//! projecting every remaining gradient onto the plane orthogonal to the
//! displacement from the unlearned model, so recovery cannot revert the
//! unlearning.
//!
//! Modules:
//! - [`nn`]: flat-parameter MLP, the two training losses, manual
//!   backprop, local SGD.
//! - [`linalg`]: Gram matrices, Jacobi eigendecomposition, the
//!   constrained direction solve, normal-plane projection.
//! - [`data`]: synthetic blob datasets, IDX image ingestion, client
//!   partitioning, backdoor triggers.
//! - [`engine`]: round loops and the full experiment driver.
//! - [`baselines`]: alternative unlearning direction strategies and
//!   retraining.
//! - [`metrics`]: per-round records, attack success rate, retained
//!   accuracy, CSV/JSON emission.
//! - [`checkpoint`]: binary model snapshots.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod nn;

use rand::distr::uniform::SampleUniform;
use std::fmt;

/// Scalar the numeric kernels are generic over. Implemented for `f32`
/// and `f64`; the experiment pipeline runs on [`Real`].
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + SampleUniform
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Float for f32 {}
impl Float for f64 {}

/// Converts an `f64` constant into the working scalar type.
#[inline]
pub fn cast<F: Float>(x: f64) -> F {
    F::from_f64(x).expect("constant not representable in scalar type")
}

/// Widens a working scalar to `f64` for reporting.
#[inline]
pub fn widen<F: Float>(x: F) -> f64 {
    x.to_f64().expect("scalar not representable as f64")
}

/// Scalar used by the experiment driver, the CLI, and the checkpoint
/// format.
pub type Real = f64;
/// Model over the default scalar.
pub type RealModel = nn::ModelParams<Real>;
/// Flat parameter/gradient vector over the default scalar.
pub type RealVec = Vec<Real>;
