//! Explicit mutual-information maximization for self-supervised learning.
//!
//! The crate is organized bottom-up:
//!
//! - [`matrix`]: dense symmetric kernel (Jacobi eigensolver, Cholesky log-det,
//!   block-determinant factorization).
//! - [`ggd`]: multivariate generalized Gaussian sampling and density, the
//!   closed-form mutual information, and a KSG estimator used to validate it.
//! - [`embed`]: embedding batches, per-feature standardization, Gram matrices.
//! - [`loss`]: the rescaled truncated log-det loss and its analytic gradients.
//! - [`siamese`]: a small MLP Siamese trainer with optional momentum target.
//! - [`synth`]: synthetic blobs and paired augmentations.
//! - [`eval`]: linear probe, k-NN accuracy, collapse diagnostics.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod embed;
pub mod error;
pub mod eval;
pub mod ggd;
pub mod loss;
pub mod matrix;
pub mod siamese;
pub mod synth;

pub use error::{Error, Result};
