//! Faithful-by-construction edge attribution for graph neural networks.
//!
//! This crate trains a small relational GNN on a synthetic benchmark with
//! known ground-truth explanations, then learns per-layer, per-edge gates
//! that reveal which messages the model actually uses. Several baseline
//! attribution methods and an evaluation harness (faithfulness, stability,
//! degradation) round out the toolkit.
//!
//! Everything numeric is generic over the scalar type (`f32`/`f64`); the
//! aliases below fix the default precision used by the CLI and tests.

pub mod attribution;
pub mod baselines;
pub mod check;
pub mod error;
pub mod eval;
pub mod gates;
pub mod gnn;
pub mod graphmask;
pub mod graphs;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Real;

/// Default scalar precision for models and training.
pub type Scalar = f64;
pub type Tape = tensor::Tape<Scalar>;
pub type ParamSet = params::ParamSet<Scalar>;
pub type Adam = optim::Adam<Scalar>;
pub type RmsProp = optim::RmsProp<Scalar>;
