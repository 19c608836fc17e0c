//! Learned Gaussian priors for small fully-connected networks.
//!
//! The crate is organised bottom-up:
//!
//! - [`kronalg`]: Kronecker-factored matrices, sums of Kronecker products and
//!   the power method that compresses such sums into a single product.
//! - [`gaussdist`]: layer-wise matrix-normal distributions over weights.
//! - [`net`]: a fully-connected classifier with manual reverse-mode gradients.
//! - [`curvature`]: dense, KFAC and KFOC Fisher estimates.
//! - [`laplace`]: MAP training, posterior assembly, prior learning and
//!   Monte-Carlo prediction.
//! - [`pacbayes`]: closed-form PAC-Bayes objectives over per-layer curvature
//!   scales, their optimisation and Monte-Carlo evaluation of the true bounds.
//! - [`bpnn`]: Bayesian progressive networks built from the pieces above.
//!
//! Vectorisation is row-major throughout: `vec(W)[i * cols + j] = W[(i, j)]`.
//! Under this convention `vec(A X Bᵀ) = (A ⊗ B) vec(X)`.

pub mod bpnn;
pub mod curvature;
pub mod data;
pub mod error;
pub mod gaussdist;
pub mod kronalg;
pub mod laplace;
pub mod matrix_io;
pub mod net;
pub mod optim;
pub mod pacbayes;

pub use error::{Error, Result};
