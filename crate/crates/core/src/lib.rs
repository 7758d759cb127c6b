//! Factorized spatial-semantic representation learning at desk scale.
//!
//! An image's patch features are modelled as `Z = L·S`: a row-stochastic
//! localization matrix `L` (where) times a small set of semantic tokens `S`
//! (what). The crate provides the transport solvers used to build clustering
//! targets and token matchings, the loss terms, a small ViT-style encoder and
//! decoder on a hand-written autodiff tape, a training pipeline and the
//! evaluation probes.

pub mod error;
pub mod eval;
pub mod factorization;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod raster;
pub mod tensor;
pub mod transport;

pub use error::{Result, StellarError};
