//! Structural topic model over embedding vectors.
//!
//! Images are represented by embeddings `z_i`; each is modeled as a noisy
//! convex combination of K topic embeddings, with topic prevalence driven
//! by covariates through a logistic-normal prior. The posterior is
//! approximated with mean-field Gaussian variational inference fitted by
//! doubly stochastic gradient ascent.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod diagnostics;
mod error;

pub mod inference;
pub mod io;
pub mod kernel;
pub mod model;
pub mod quantities;

pub use error::{Divergence, Error, Result};
pub use inference::{fit, refit_local, FitConfig, FitResult, VariationalState};
pub use model::{Dataset, GlobalParams, ModelSpec};
