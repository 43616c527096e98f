//! Joint density of the embedding topic model.
//!
//! Each embedding is a noisy convex combination of K topic embeddings,
//!
//! ```text
//! z_i ~ normal(θ_iᵀ B, I)
//! ζ_i ~ normal(x_i Γ, diag(σ) Ω diag(σ)),   θ_i = softmax([ζ_i, 0])
//! ```
//!
//! with student-t priors on Γ and B, an LKJ prior on Ω (carried as its
//! Cholesky factor) and a half-normal prior on σ. Local proportions live in
//! the unconstrained ζ space throughout.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::kernel::{
    half_normal_logpdf, lkj_logdensity, lkj_logdensity_grad, mvn_logpdf_scaled_chol,
    softmax_with_reference, CholeskyCorrelation, SimplexVector, StudentT, LN_2PI,
};

pub const DEFAULT_NU: f64 = 5.0;
pub const DEFAULT_SIGMA_GAMMA: f64 = 2.5;
pub const DEFAULT_SIGMA_BETA: f64 = 1.0;
pub const DEFAULT_ETA_THETA: f64 = 1.0;
pub const SIGMA_THETA_PRIOR_SCALE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub k: usize,
    pub d: usize,
    pub p: usize,
    pub nu_gamma: f64,
    pub sigma_gamma: f64,
    pub nu_beta: f64,
    pub sigma_beta_base: f64,
    pub eta_theta: f64,
    /// Per-dimension standard deviation of the centered embeddings.
    pub sd_scale: Vec<f64>,
}

impl ModelSpec {
    /// Default hyperparameters for the given shapes.
    pub fn new(k: usize, d: usize, p: usize, sd_scale: Vec<f64>) -> Result<Self> {
        let spec = ModelSpec {
            k,
            d,
            p,
            nu_gamma: DEFAULT_NU,
            sigma_gamma: DEFAULT_SIGMA_GAMMA,
            nu_beta: DEFAULT_NU,
            sigma_beta_base: DEFAULT_SIGMA_BETA,
            eta_theta: DEFAULT_ETA_THETA,
            sd_scale,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.d == 0 || self.p == 0 {
            return Err(Error::InvalidParameter(
                "K, D and P must all be at least 1".into(),
            ));
        }
        check_len("sd_scale", self.d, self.sd_scale.len())?;
        let hyper = [
            ("nu_gamma", self.nu_gamma),
            ("sigma_gamma", self.sigma_gamma),
            ("nu_beta", self.nu_beta),
            ("sigma_beta", self.sigma_beta_base),
            ("eta_theta", self.eta_theta),
        ];
        for (name, v) in hyper {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if self.sd_scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter("sd_scale entries must be positive".into()));
        }
        Ok(())
    }

    /// Dimension of the unconstrained proportion space.
    pub fn k_free(&self) -> usize {
        self.k - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalParams {
    /// K×D topic embeddings.
    pub b: Array2<f64>,
    /// P×(K−1) prevalence coefficients.
    pub gamma: Array2<f64>,
    pub sigma_theta: Vec<f64>,
    pub chol_omega: CholeskyCorrelation,
}

impl GlobalParams {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let km = spec.k_free();
        check_len("B rows", spec.k, self.b.nrows())?;
        check_len("B columns", spec.d, self.b.ncols())?;
        check_len("Gamma rows", spec.p, self.gamma.nrows())?;
        check_len("Gamma columns", km, self.gamma.ncols())?;
        check_len("sigma_theta", km, self.sigma_theta.len())?;
        check_len("Omega dimension", km, self.chol_omega.dim())?;
        if self.sigma_theta.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidParameter("sigma_theta must be positive".into()));
        }
        if self.b.iter().chain(self.gamma.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("global parameters".into()));
        }
        Ok(())
    }

    /// Full covariance diag(σ)·Ω·diag(σ), row-major.
    pub fn sigma_theta_matrix(&self) -> Vec<f64> {
        let n = self.sigma_theta.len();
        let mut omega = self.chol_omega.correlation();
        for i in 0..n {
            for j in 0..n {
                omega[i * n + j] *= self.sigma_theta[i] * self.sigma_theta[j];
            }
        }
        omega
    }
}

/// Unconstrained topic-proportion coordinates, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalParams {
    pub zeta: Array2<f64>,
}

impl LocalParams {
    pub fn theta(&self) -> Array2<f64> {
        softmax_rows(self.zeta.view())
    }
}

/// Row-wise softmax with an appended zero column.
pub fn softmax_rows(zeta: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((zeta.nrows(), zeta.ncols() + 1));
    for (z, mut o) in zeta.outer_iter().zip(out.outer_iter_mut()) {
        let z = z.to_vec();
        softmax_with_reference(&z, o.as_slice_mut().expect("standard layout"));
    }
    out
}

/// Embeddings and covariates for the same images, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub embeddings: Array2<f64>,
    pub design: Array2<f64>,
}

impl Dataset {
    pub fn new(embeddings: Array2<f64>, design: Array2<f64>) -> Result<Self> {
        check_len("design rows", embeddings.nrows(), design.nrows())?;
        Ok(Dataset { embeddings, design })
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            embeddings: self.embeddings.select(Axis(0), rows),
            design: self.design.select(Axis(0), rows),
        }
    }
}

/// −½·D·log(2π) − ½·‖z_i − θ_iᵀB‖².
pub fn log_likelihood(z: &[f64], theta: &SimplexVector, b: ArrayView2<f64>) -> Result<f64> {
    check_len("topic count", b.nrows(), theta.len())?;
    check_len("embedding dimension", b.ncols(), z.len())?;
    let d = z.len();
    let mut sq = 0.0;
    for j in 0..d {
        let mean: f64 = theta
            .as_slice()
            .iter()
            .zip(b.column(j))
            .map(|(t, bk)| t * bk)
            .sum();
        let r = z[j] - mean;
        sq += r * r;
    }
    Ok(-0.5 * d as f64 * LN_2PI - 0.5 * sq)
}

fn beta_priors(spec: &ModelSpec) -> Result<Vec<StudentT>> {
    spec.sd_scale
        .iter()
        .map(|s| StudentT::new(spec.nu_beta, 0.0, spec.sigma_beta_base * s))
        .collect()
}

/// Log prior of the global parameters.
pub fn log_prior_globals(params: &GlobalParams, spec: &ModelSpec) -> Result<f64> {
    params.validate(spec)?;
    let mut grad = GlobalGrad::zeros(spec);
    log_prior_globals_grad(params, spec, &mut grad)
}

/// Gradient accumulator w.r.t. the constrained global parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalGrad {
    pub b: Array2<f64>,
    pub gamma: Array2<f64>,
    pub sigma: Vec<f64>,
    /// Row-major (K−1)×(K−1) gradient w.r.t. the Cholesky factor entries.
    pub lower: Vec<f64>,
}

impl GlobalGrad {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let km = spec.k_free();
        GlobalGrad {
            b: Array2::zeros((spec.k, spec.d)),
            gamma: Array2::zeros((spec.p, km)),
            sigma: vec![0.0; km],
            lower: vec![0.0; km * km],
        }
    }
}

/// Log prior of the globals; adds its gradient into `grad`.
pub(crate) fn log_prior_globals_grad(
    params: &GlobalParams,
    spec: &ModelSpec,
    grad: &mut GlobalGrad,
) -> Result<f64> {
    let mut total = 0.0;
    let t_gamma = StudentT::new(spec.nu_gamma, 0.0, spec.sigma_gamma)?;
    for (g, out) in params.gamma.iter().zip(grad.gamma.iter_mut()) {
        total += t_gamma.ln_pdf(*g);
        *out += t_gamma.ln_pdf_grad(*g);
    }
    let t_beta = beta_priors(spec)?;
    for (row, mut out) in params.b.outer_iter().zip(grad.b.outer_iter_mut()) {
        for ((v, t), o) in row.iter().zip(&t_beta).zip(out.iter_mut()) {
            total += t.ln_pdf(*v);
            *o += t.ln_pdf_grad(*v);
        }
    }
    total += lkj_logdensity(&params.chol_omega, spec.eta_theta)?;
    lkj_logdensity_grad(&params.chol_omega, spec.eta_theta, &mut grad.lower);
    for (s, g) in params.sigma_theta.iter().zip(grad.sigma.iter_mut()) {
        total += half_normal_logpdf(*s, SIGMA_THETA_PRIOR_SCALE);
        *g -= s / (SIGMA_THETA_PRIOR_SCALE * SIGMA_THETA_PRIOR_SCALE);
    }
    Ok(total)
}

/// Normal log density of ζ_i around x_iΓ with covariance diag(σ)·Ω·diag(σ).
///
/// No ALR Jacobian is applied: the variational density is expressed in the
/// same coordinates, so the two Jacobians cancel in the ELBO.
pub fn local_logprior_unconstrained(
    zeta: &[f64],
    x: &[f64],
    params: &GlobalParams,
) -> Result<f64> {
    let km = params.gamma.ncols();
    check_len("zeta", km, zeta.len())?;
    check_len("covariates", params.gamma.nrows(), x.len())?;
    let mean = ArrayView1::from(x).dot(&params.gamma);
    let mut scratch = vec![0.0; km];
    Ok(mvn_logpdf_scaled_chol(
        zeta,
        mean.as_slice().expect("contiguous"),
        &params.sigma_theta,
        &params.chol_omega,
        &mut scratch,
    ))
}

/// Rows of a minibatch: embeddings and covariates.
#[derive(Debug, Clone, Copy)]
pub struct BatchView<'a> {
    pub embeddings: ArrayView2<'a, f64>,
    pub design: ArrayView2<'a, f64>,
}

/// scale·Σ_i [log_likelihood + local_logprior_unconstrained] + log_prior_globals.
pub fn log_joint(
    batch: BatchView<'_>,
    zeta: ArrayView2<f64>,
    params: &GlobalParams,
    spec: &ModelSpec,
    scale: f64,
) -> Result<f64> {
    params.validate(spec)?;
    check_len("batch design rows", batch.embeddings.nrows(), batch.design.nrows())?;
    check_len("batch zeta rows", batch.embeddings.nrows(), zeta.nrows())?;
    check_len("embedding dimension", spec.d, batch.embeddings.ncols())?;
    check_len("covariate count", spec.p, batch.design.ncols())?;
    check_len("zeta columns", spec.k_free(), zeta.ncols())?;
    let mut g = GlobalGrad::zeros(spec);
    let mut gz = Array2::zeros(zeta.raw_dim());
    let data = data_term_grad(batch, zeta, params, scale, &mut g, &mut gz);
    Ok(data + log_prior_globals(params, spec)?)
}

/// Per-batch data term with gradients.
///
/// Returns scale·Σ_i [log_likelihood_i + local_logprior_i] and adds its
/// gradient w.r.t. B, Γ, σ, L into `grad` and w.r.t. each ζ row into
/// `grad_zeta`.
pub(crate) fn data_term_grad(
    batch: BatchView<'_>,
    zeta: ArrayView2<f64>,
    params: &GlobalParams,
    scale: f64,
    grad: &mut GlobalGrad,
    grad_zeta: &mut Array2<f64>,
) -> f64 {
    let n = zeta.nrows();
    if n == 0 {
        return 0.0;
    }
    let km = zeta.ncols();
    let d = batch.embeddings.ncols();
    let theta = softmax_rows(zeta);

    // likelihood
    let mut resid = batch.embeddings.to_owned();
    resid -= &theta.dot(&params.b);
    let sq: f64 = resid.iter().map(|r| r * r).sum();
    let mut total = -0.5 * (n * d) as f64 * LN_2PI - 0.5 * sq;
    grad.b.scaled_add(scale, &theta.t().dot(&resid));
    let a = resid.dot(&params.b.t());
    for i in 0..n {
        let t = theta.row(i);
        let ar = a.row(i);
        let mean_a: f64 = t.iter().zip(ar.iter()).map(|(t, a)| t * a).sum();
        for k in 0..km {
            grad_zeta[[i, k]] += scale * t[k] * (ar[k] - mean_a);
        }
    }

    // local prior
    if km > 0 {
        let mu = batch.design.dot(&params.gamma);
        let sigma = &params.sigma_theta;
        let chol = &params.chol_omega;
        let mut v_all = Array2::<f64>::zeros((n, km));
        let mut gm = vec![0.0; km * km];
        let mut w = vec![0.0; km];
        let mut v = vec![0.0; km];
        for i in 0..n {
            let z: Vec<f64> = zeta.row(i).to_vec();
            let m = mu.row(i);
            total += mvn_logpdf_scaled_chol(&z, m.as_slice().unwrap(), sigma, chol, &mut w);
            // solve (diag(σ)L)ᵀ v = w
            for j in (0..km).rev() {
                let mut s = w[j];
                for k in j + 1..km {
                    s -= sigma[k] * chol.get(k, j) * v[k];
                }
                v[j] = s / (sigma[j] * chol.get(j, j));
            }
            for k in 0..km {
                grad_zeta[[i, k]] -= scale * v[k];
                v_all[[i, k]] = v[k];
                for j in 0..=k {
                    gm[k * km + j] += v[k] * w[j];
                }
            }
        }
        for k in 0..km {
            gm[k * km + k] -= n as f64 / (sigma[k] * chol.get(k, k));
        }
        grad.gamma.scaled_add(scale, &batch.design.t().dot(&v_all));
        for k in 0..km {
            for j in 0..=k {
                let g = scale * gm[k * km + j];
                grad.sigma[k] += g * chol.get(k, j);
                grad.lower[k * km + j] += g * sigma[k];
            }
        }
    }
    scale * total
}
