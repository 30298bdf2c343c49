//! Highway deep neural network training toolkit.
//!
//! A from-scratch feedforward trainer built around highway layers whose
//! transform and carry gates are shared across depth, with plain-DNN and
//! residual baselines, exact parameter accounting, a deterministic training
//! loop, and independent gradient verification.

pub mod cli;
pub mod data;
pub mod error;
pub mod linalg;
pub mod model;
pub mod training;
pub mod verification;

pub use error::{Error, Result};
pub use linalg::{Activation, Matrix};
pub use model::{ArchSpec, GateMode, LayerKind, ModelParams};
