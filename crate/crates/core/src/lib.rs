//! Geometry of supervised representations, at desk scale.
//!
//! `isogeo-core` trains small encoder/decoder networks under three objectives
//! (plain risk minimisation, PGD adversarial training and Gaussian
//! perturbation matching), measures the geometry of the learned encoders
//! (trajectory deviation index, embedding drift, Jacobian norms, anisotropy,
//! decoder Lipschitz constants) and ships executable checks for the analytic
//! identities and bounds that govern a correlated-nuisance Gaussian model.
//!
//! The crate is `no_std` and only needs `alloc`. Every random quantity is
//! drawn from an explicit [`RngState`], so all results are pure functions of
//! their inputs and seed.

// `!(x >= 0.0)` rejects NaN together with negatives; kept on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

#![no_std]
#![warn(missing_debug_implementations)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod data;
pub mod diagnostics;
mod error;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod objectives;
pub mod rng;
pub mod stats;
pub mod toy;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use model::{Activation, ActivationTrace, Layer, MlpEncoderDecoder, ModelSpec};
pub use rng::RngState;
