//! Mean-field variational inference for the topic model.
//!
//! Every parameter block gets an independent Gaussian factor in its
//! unconstrained space. The ELBO is estimated by reparameterized Monte Carlo
//! on minibatches and maximized with Adam.

pub mod adam;
pub mod amortizer;
pub mod checkpoint;
pub mod elbo;
pub mod fit;
pub mod state;

pub use adam::{adam_step, adam_update, AdamConfig, AdamMoments};
pub use amortizer::{amortize_forward, Dense, Mlp};
pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use elbo::{elbo_estimate, elbo_value_and_grad, sample_variational, LocalGrad, Noise, ParameterDraw, VariationalGrad};
pub use fit::{
    fit, local_factors, refit_local, resume, theta_posterior_mean, DataDigests, FitConfig, FitResult, FitSession,
    LocalFit, Manifest, THETA_DRAWS,
};
pub use state::{GaussianBlock, GlobalBlocks, LocalFamily, VariationalState, GLOBAL_BLOCK_NAMES};
