//! Disentanglement laboratory for small generative models.
//!
//! The crate bundles a dense-tensor reverse-mode autodiff engine, a procedural
//! sprite dataset with exact ground-truth factors, a DCGAN-style generator with
//! per-layer taps, the orthogonal Jacobian regularizer (exact and Hutchinson
//! estimators), the Hessian Penalty baseline, closed-form SVD direction
//! discovery, learned orthonormal direction discovery on frozen generators, a
//! GAN training loop and the evaluation metrics (variation predictability,
//! activeness and a pixel-space path length).

pub mod data;
pub mod discovery;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod par;
pub mod regularizers;
pub mod rng;
pub mod sefa;
pub mod tensor;
pub mod toy;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
