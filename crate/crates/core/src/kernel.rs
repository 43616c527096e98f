//! Log densities and constrained transforms shared by the model, the
//! variational machinery and the diagnostics.
//!
//! Everything here works in log space. Transforms return their log-Jacobian
//! alongside the constrained value so callers can correct densities under a
//! change of variables.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{check_len, Error, Result};

pub const LN_2PI: f64 = 1.837_877_066_409_345_3;
const SIMPLEX_TOL: f64 = 1e-9;

/// A point on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplexVector(Vec<f64>);

impl SimplexVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("simplex vector must be nonempty".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(
                "simplex entries must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidInput(format!(
                "simplex entries sum to {total}, not 1"
            )));
        }
        Ok(SimplexVector(values))
    }

    pub fn uniform(k: usize) -> Self {
        SimplexVector(vec![1.0 / k as f64; k])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_interior(&self) -> bool {
        self.0.iter().all(|&v| v > 0.0)
    }
}

/// Lower Cholesky factor of a correlation matrix, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CholeskyCorrelation {
    dim: usize,
    lower: Vec<f64>,
}

impl CholeskyCorrelation {
    pub fn identity(dim: usize) -> Self {
        let mut lower = vec![0.0; dim * dim];
        for i in 0..dim {
            lower[i * dim + i] = 1.0;
        }
        CholeskyCorrelation { dim, lower }
    }

    /// Validates unit row norms, a positive diagonal and a zero upper triangle.
    pub fn from_lower(dim: usize, lower: Vec<f64>) -> Result<Self> {
        check_len("cholesky factor", dim * dim, lower.len())?;
        for i in 0..dim {
            let row = &lower[i * dim..(i + 1) * dim];
            if row[i + 1..].iter().any(|&v| v != 0.0) {
                return Err(Error::InvalidParameter(
                    "cholesky factor has nonzero upper triangle".into(),
                ));
            }
            if !(row[i] > 0.0) {
                return Err(Error::InvalidParameter(
                    "cholesky factor diagonal must be positive".into(),
                ));
            }
            let norm: f64 = row.iter().map(|v| v * v).sum();
            if (norm - 1.0).abs() > 1e-8 {
                return Err(Error::InvalidParameter(format!(
                    "cholesky row {i} has squared norm {norm}"
                )));
            }
        }
        Ok(CholeskyCorrelation { dim, lower })
    }

    /// Factorizes a correlation matrix given row-major.
    pub fn from_correlation(dim: usize, corr: &[f64]) -> Result<Self> {
        check_len("correlation matrix", dim * dim, corr.len())?;
        let mut lower = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..=i {
                let mut s = corr[i * dim + j];
                for k in 0..j {
                    s -= lower[i * dim + k] * lower[j * dim + k];
                }
                if i == j {
                    if s <= 0.0 {
                        return Err(Error::InvalidParameter(
                            "correlation matrix is not positive definite".into(),
                        ));
                    }
                    lower[i * dim + i] = s.sqrt();
                } else {
                    lower[i * dim + j] = s / lower[j * dim + j];
                }
            }
            // Renormalize rows against rounding so the unit-norm invariant holds exactly.
            let norm: f64 = lower[i * dim..(i + 1) * dim]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            for v in &mut lower[i * dim..(i + 1) * dim] {
                *v /= norm;
            }
        }
        CholeskyCorrelation::from_lower(dim, lower)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.lower[i * self.dim + j]
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    /// L·Lᵀ, row-major.
    pub fn correlation(&self) -> Vec<f64> {
        let n = self.dim;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..=j).map(|k| self.get(i, k) * self.get(j, k)).sum();
                out[i * n + j] = s;
                out[j * n + i] = s;
            }
        }
        for i in 0..n {
            out[i * n + i] = 1.0;
        }
        out
    }
}

/// Seeded, stream-separated random source.
///
/// Identical `(seed, stream)` pairs reproduce the identical draw sequence.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha20Rng,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A new independent stream derived from the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        RngStream::new(self.seed, stream)
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut s = RngStream::new(state.seed, state.stream);
        s.rng.set_word_pos(state.word_pos);
        s
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = StandardNormal.sample(&mut self.rng);
        }
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        rand::Rng::random::<f64>(&mut self.rng)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        rand::Rng::random_range(&mut self.rng, 0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

fn ensure_finite(context: &str, values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(context.to_string()));
    }
    Ok(())
}

/// Σ_d log N(x_d | mean_d, sd_d²).
pub fn normal_logpdf(x: &[f64], mean: &[f64], sd: &[f64]) -> Result<f64> {
    check_len("normal_logpdf mean", x.len(), mean.len())?;
    check_len("normal_logpdf sd", x.len(), sd.len())?;
    if sd.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidParameter("normal sd must be positive".into()));
    }
    Ok(x.iter()
        .zip(mean)
        .zip(sd)
        .map(|((&x, &m), &s)| {
            let r = (x - m) / s;
            -0.5 * LN_2PI - s.ln() - 0.5 * r * r
        })
        .sum())
}

/// Location-scale student-t with its normalizing constant precomputed.
#[derive(Debug, Clone, Copy)]
pub struct StudentT {
    df: f64,
    loc: f64,
    scale: f64,
    log_norm: f64,
}

impl StudentT {
    pub fn new(df: f64, loc: f64, scale: f64) -> Result<Self> {
        if !(df > 0.0) || !(scale > 0.0) {
            return Err(Error::InvalidParameter(
                "student-t df and scale must be positive".into(),
            ));
        }
        let log_norm = ln_gamma(0.5 * (df + 1.0))
            - ln_gamma(0.5 * df)
            - 0.5 * (df * std::f64::consts::PI).ln()
            - scale.ln();
        Ok(StudentT {
            df,
            loc,
            scale,
            log_norm,
        })
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        let r = (x - self.loc) / self.scale;
        self.log_norm - 0.5 * (self.df + 1.0) * (r * r / self.df).ln_1p()
    }

    /// d/dx of `ln_pdf`.
    pub fn ln_pdf_grad(&self, x: f64) -> f64 {
        let d = x - self.loc;
        -(self.df + 1.0) * d / (self.df * self.scale * self.scale + d * d)
    }
}

pub fn studentt_logpdf(x: f64, df: f64, loc: f64, scale: f64) -> Result<f64> {
    Ok(StudentT::new(df, loc, scale)?.ln_pdf(x))
}

/// Half-normal(0, scale) log density on the positive half line.
pub fn half_normal_logpdf(x: f64, scale: f64) -> f64 {
    let r = x / scale;
    std::f64::consts::LN_2 - 0.5 * LN_2PI - scale.ln() - 0.5 * r * r
}

/// Writes softmax([zeta, 0]) into `out` (length zeta.len() + 1).
pub(crate) fn softmax_with_reference(zeta: &[f64], out: &mut [f64]) {
    debug_assert_eq!(out.len(), zeta.len() + 1);
    let max = zeta.iter().copied().fold(0.0_f64, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(zeta) {
        *o = (z - max).exp();
        total += *o;
    }
    let last = (-max).exp();
    out[zeta.len()] = last;
    total += last;
    for o in out.iter_mut() {
        *o /= total;
    }
}

fn log_sum_exp_with_reference(zeta: &[f64]) -> f64 {
    let max = zeta.iter().copied().fold(0.0_f64, f64::max);
    let s: f64 = zeta.iter().map(|z| (z - max).exp()).sum::<f64>() + (-max).exp();
    max + s.ln()
}

/// softmax of `[zeta, 0]`; the last coordinate is the reference category.
pub fn alr_softmax(zeta: &[f64]) -> Result<SimplexVector> {
    ensure_finite("alr_softmax input", zeta)?;
    let mut out = vec![0.0; zeta.len() + 1];
    softmax_with_reference(zeta, &mut out);
    Ok(SimplexVector(out))
}

/// Inverse of [`alr_softmax`]: log θ_k − log θ_K.
pub fn alr(theta: &SimplexVector) -> Result<Vec<f64>> {
    if !theta.is_interior() {
        return Err(Error::InvalidInput(
            "simplex point lies on the boundary".into(),
        ));
    }
    let t = theta.as_slice();
    let last = t[t.len() - 1].ln();
    Ok(t[..t.len() - 1].iter().map(|v| v.ln() - last).collect())
}

/// log |det ∂θ_{1:K-1}/∂ζ| of the ALR-softmax map, which is Σ_k log θ_k.
pub fn alr_softmax_log_jacobian(zeta: &[f64]) -> Result<f64> {
    ensure_finite("alr_softmax_log_jacobian input", zeta)?;
    let lse = log_sum_exp_with_reference(zeta);
    Ok(zeta.iter().map(|z| z - lse).sum::<f64>() - lse)
}

/// exp transform with log-Jacobian `u`.
pub fn positive_transform(u: f64) -> Result<(f64, f64)> {
    if !u.is_finite() {
        return Err(Error::NonFinite("positive_transform input".into()));
    }
    Ok((u.exp(), u))
}

/// Number of canonical partial correlations for a `dim`×`dim` factor.
pub fn cpc_len(dim: usize) -> usize {
    dim * dim.saturating_sub(1) / 2
}

/// log(1 − tanh²(y)) without cancellation for large |y|.
fn log1m_tanh_sq(y: f64) -> f64 {
    let a = y.abs();
    2.0 * (std::f64::consts::LN_2 - a - (-2.0 * a).exp().ln_1p())
}

/// Largest double below 1; tanh saturates to exactly ±1 for |y| ≳ 19.
const MAX_PARTIAL_CORRELATION: f64 = 1.0 - f64::EPSILON / 2.0;

/// Maps unconstrained canonical partial correlations to a correlation
/// Cholesky factor via tanh and row-wise normalization.
///
/// Entries of `y` fill the strictly lower triangle row by row. The returned
/// log-Jacobian is taken with respect to the strictly lower elements of L.
pub fn cpc_to_cholesky(y: &[f64], dim: usize) -> Result<(CholeskyCorrelation, f64)> {
    check_len("cpc vector", cpc_len(dim), y.len())?;
    ensure_finite("cpc_to_cholesky input", y)?;
    let mut lower = vec![0.0; dim * dim];
    let mut log_jac = 0.0;
    let mut k = 0;
    for i in 0..dim {
        // log of 1 − Σ_{c<j} L_ic², kept as a product of (1 − z²) factors
        let mut log_rem = 0.0f64;
        for j in 0..i {
            let z = y[k].tanh().clamp(-MAX_PARTIAL_CORRELATION, MAX_PARTIAL_CORRELATION);
            let log1m = log1m_tanh_sq(y[k]);
            log_jac += log1m;
            if j > 0 {
                log_jac += 0.5 * log_rem;
            }
            lower[i * dim + j] = z * (0.5 * log_rem).exp();
            log_rem += log1m;
            k += 1;
        }
        lower[i * dim + i] = (0.5 * log_rem).exp();
    }
    if lower.iter().any(|v| !v.is_finite()) || (0..dim).any(|i| !(lower[i * dim + i] > 0.0)) {
        return Err(Error::NonFinite("cpc_to_cholesky output".into()));
    }
    Ok((CholeskyCorrelation { dim, lower }, log_jac))
}

/// Reverse-mode pass through [`cpc_to_cholesky`].
///
/// Returns the gradient w.r.t. `y` of `Σ grad_lower ⊙ L + jac_weight · log_jacobian`.
pub fn cpc_to_cholesky_backward(
    y: &[f64],
    dim: usize,
    grad_lower: &[f64],
    jac_weight: f64,
) -> Vec<f64> {
    debug_assert_eq!(y.len(), cpc_len(dim));
    debug_assert_eq!(grad_lower.len(), dim * dim);
    let mut grad_y = vec![0.0; y.len()];
    let mut offset = 0;
    let mut z = Vec::with_capacity(dim);
    let mut remaining = Vec::with_capacity(dim);
    let mut vals = Vec::with_capacity(dim);
    for i in 0..dim {
        z.clear();
        remaining.clear();
        vals.clear();
        let mut log_rem = 0.0f64;
        for j in 0..i {
            let zj = y[offset + j].tanh();
            let rem = log_rem.exp();
            z.push(zj);
            remaining.push(rem);
            vals.push(zj * (0.5 * log_rem).exp());
            log_rem += log1m_tanh_sq(y[offset + j]);
        }
        let diag = (0.5 * log_rem).exp();
        // adjoint of the running sum of squares after the last off-diagonal entry
        let mut g_sum = -grad_lower[i * dim + i] / (2.0 * diag);
        for j in (0..i).rev() {
            let g_val = grad_lower[i * dim + j] + 2.0 * vals[j] * g_sum;
            let sqrt_rem = remaining[j].sqrt();
            let g_z = g_val * sqrt_rem;
            if j > 0 {
                let g_sqrt = g_val * z[j];
                // remaining = 1 − sum_sq, sqrt' = 1/(2 sqrt), log term ½ log(remaining)
                g_sum -= g_sqrt / (2.0 * sqrt_rem);
                g_sum -= jac_weight * 0.5 / remaining[j];
            }
            let t = z[j];
            grad_y[offset + j] = g_z * (1.0 - t * t) - jac_weight * 2.0 * t;
        }
        offset += i;
    }
    grad_y
}

/// Inverse of [`cpc_to_cholesky`].
pub fn cholesky_to_cpc(chol: &CholeskyCorrelation) -> Vec<f64> {
    let dim = chol.dim();
    let mut y = Vec::with_capacity(cpc_len(dim));
    for i in 0..dim {
        let mut sum_sq = 0.0f64;
        for j in 0..i {
            let v = chol.get(i, j);
            let z = v / (1.0 - sum_sq).sqrt();
            y.push(z.clamp(-1.0 + 1e-16, 1.0 - 1e-16).atanh());
            sum_sq += v * v;
        }
    }
    y
}

fn lkj_diag_coefficient(dim: usize, row: usize, eta: f64) -> f64 {
    // row is 0-based; exponent on L_rr is (dim − row − 1) + 2(η − 1)
    (dim - row - 1) as f64 + 2.0 * (eta - 1.0)
}

/// Unnormalized LKJ(η) log density expressed on the Cholesky factor.
pub fn lkj_logdensity(chol: &CholeskyCorrelation, eta: f64) -> Result<f64> {
    if !(eta > 0.0) {
        return Err(Error::InvalidParameter("LKJ eta must be positive".into()));
    }
    let n = chol.dim();
    Ok((1..n)
        .map(|i| lkj_diag_coefficient(n, i, eta) * chol.get(i, i).ln())
        .sum())
}

/// Adds ∂ lkj_logdensity / ∂L into `grad_lower` (row-major, dim×dim).
pub(crate) fn lkj_logdensity_grad(chol: &CholeskyCorrelation, eta: f64, grad_lower: &mut [f64]) {
    let n = chol.dim();
    for i in 1..n {
        grad_lower[i * n + i] += lkj_diag_coefficient(n, i, eta) / chol.get(i, i);
    }
}

/// Multivariate normal log density with covariance (diag(σ)·L)(diag(σ)·L)ᵀ.
///
/// `scratch` must have length ≥ x.len(); on return it holds the whitened
/// residual w with diag(σ)·L·w = x − μ.
pub(crate) fn mvn_logpdf_scaled_chol(
    x: &[f64],
    mean: &[f64],
    sigma: &[f64],
    chol: &CholeskyCorrelation,
    scratch: &mut [f64],
) -> f64 {
    let n = x.len();
    let mut log_det = 0.0;
    let mut quad = 0.0;
    for i in 0..n {
        let mut s = x[i] - mean[i];
        for j in 0..i {
            s -= sigma[i] * chol.get(i, j) * scratch[j];
        }
        let d = sigma[i] * chol.get(i, i);
        let w = s / d;
        scratch[i] = w;
        quad += w * w;
        log_det += d.ln();
    }
    -0.5 * n as f64 * LN_2PI - log_det - 0.5 * quad
}

fn validate_scale_params(n: usize, sigma: &[f64], chol: &CholeskyCorrelation) -> Result<()> {
    check_len("sigma", n, sigma.len())?;
    check_len("correlation factor", n, chol.dim())?;
    if sigma.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidParameter("sigma must be positive".into()));
    }
    Ok(())
}

/// Unconstrained-space multivariate normal with covariance diag(σ)·L·Lᵀ·diag(σ).
pub fn mvn_logpdf(
    x: &[f64],
    mean: &[f64],
    sigma: &[f64],
    chol: &CholeskyCorrelation,
) -> Result<f64> {
    check_len("mvn mean", x.len(), mean.len())?;
    validate_scale_params(x.len(), sigma, chol)?;
    let mut scratch = vec![0.0; x.len()];
    Ok(mvn_logpdf_scaled_chol(x, mean, sigma, chol, &mut scratch))
}

/// Logistic-normal log density on θ_{1:K-1}: the normal density of alr(θ)
/// minus the ALR log-Jacobian.
pub fn logistic_normal_logpdf(
    theta: &SimplexVector,
    mu: &[f64],
    sigma: &[f64],
    chol: &CholeskyCorrelation,
) -> Result<f64> {
    check_len("logistic-normal mean", theta.len() - 1, mu.len())?;
    validate_scale_params(mu.len(), sigma, chol)?;
    let zeta = alr(theta)?;
    let log_jac: f64 = theta.as_slice().iter().map(|v| v.ln()).sum();
    let mut scratch = vec![0.0; zeta.len()];
    Ok(mvn_logpdf_scaled_chol(&zeta, mu, sigma, chol, &mut scratch) - log_jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn normal_logpdf_closed_forms() {
        assert_abs_diff_eq!(
            normal_logpdf(&[0.0], &[0.0], &[1.0]).unwrap(),
            -0.918_938_533_2,
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(
            normal_logpdf(&[1.0, 1.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap(),
            -2.837_877_066_4,
            epsilon = 1e-9
        );
        // independent scalar form: log(1/(sd·sqrt(2π))) − (x−m)²/(2sd²)
        let (x, m, s) = (0.3_f64, -0.2_f64, 2.0_f64);
        let oracle = (1.0 / (s * (2.0 * std::f64::consts::PI).sqrt())).ln()
            - (x - m).powi(2) / (2.0 * s * s);
        assert_abs_diff_eq!(
            normal_logpdf(&[x], &[m], &[s]).unwrap(),
            oracle,
            epsilon = 1e-12
        );
    }

    #[test]
    fn normal_logpdf_rejects_bad_input() {
        assert!(matches!(
            normal_logpdf(&[0.0, 1.0], &[0.0], &[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(normal_logpdf(&[0.0], &[0.0], &[0.0]).is_err());
        assert!(normal_logpdf(&[0.0], &[0.0], &[-1.0]).is_err());
    }

    #[test]
    fn studentt_cauchy_mode_and_errors() {
        assert_abs_diff_eq!(
            studentt_logpdf(0.0, 1.0, 0.0, 1.0).unwrap(),
            -std::f64::consts::PI.ln(),
            epsilon = 1e-12
        );
        assert!(studentt_logpdf(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(studentt_logpdf(0.0, 1.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn studentt_normalizes_by_quadrature() {
        // ∫ t₅(x) dx via substitution x = tan(u), u ∈ (−π/2, π/2), Simpson's rule.
        let n = 200_000;
        let (a, b) = (-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2);
        let h = (b - a) / n as f64;
        let f = |u: f64| {
            if u <= a || u >= b {
                return 0.0;
            }
            let x = u.tan();
            studentt_logpdf(x, 5.0, 0.0, 1.0).unwrap().exp() / u.cos().powi(2)
        };
        let mut total = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            total += w * f(a + i as f64 * h);
        }
        total *= h / 3.0;
        assert!((total - 1.0).abs() < 1e-6, "integral {total}");
        // density at the mode against the closed form Γ(3)/(Γ(2.5)√(5π))
        let mode = studentt_logpdf(0.0, 5.0, 0.0, 1.0).unwrap();
        let closed = (2.0_f64).ln() - ln_gamma(2.5) - 0.5 * (5.0 * std::f64::consts::PI).ln();
        assert_abs_diff_eq!(mode, closed, epsilon = 1e-12);
    }

    #[test]
    fn studentt_large_df_is_normal() {
        let t = studentt_logpdf(1.5, 1e6, 0.0, 1.0).unwrap();
        let n = normal_logpdf(&[1.5], &[0.0], &[1.0]).unwrap();
        assert!((t - n).abs() < 1e-4);
    }

    #[test]
    fn studentt_grad_matches_finite_difference() {
        let t = StudentT::new(4.0, 0.3, 1.7).unwrap();
        for &x in &[-3.0, -0.2, 0.3, 2.5] {
            let h = 1e-6;
            let fd = (t.ln_pdf(x + h) - t.ln_pdf(x - h)) / (2.0 * h);
            assert_abs_diff_eq!(t.ln_pdf_grad(x), fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn alr_softmax_examples() {
        let t = alr_softmax(&[0.0, 0.0]).unwrap();
        for v in t.as_slice() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        assert_eq!(alr_softmax(&[]).unwrap().as_slice(), &[1.0]);
        let t = alr_softmax(&[2.0_f64.ln()]).unwrap();
        assert_abs_diff_eq!(t.as_slice()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(t.as_slice()[1], 1.0 / 3.0, epsilon = 1e-15);
        assert!(alr_softmax(&[f64::NAN]).is_err());
        assert!(alr_softmax(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn alr_softmax_survives_large_inputs() {
        let t = alr_softmax(&[300.0, -300.0, 299.0]).unwrap();
        let s: f64 = t.as_slice().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(t.as_slice().iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn alr_round_trip() {
        let zeta = [0.4, -1.2, 2.0];
        let back = alr(&alr_softmax(&zeta).unwrap()).unwrap();
        for (a, b) in zeta.iter().zip(&back) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn alr_jacobian_examples() {
        assert_abs_diff_eq!(
            alr_softmax_log_jacobian(&[0.0]).unwrap(),
            (0.25_f64).ln(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(
            alr_softmax_log_jacobian(&[0.0, 0.0]).unwrap(),
            3.0 * (1.0_f64 / 3.0).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn positive_transform_examples() {
        assert_eq!(positive_transform(0.0).unwrap(), (1.0, 0.0));
        let (v, j) = positive_transform(1.0).unwrap();
        assert_abs_diff_eq!(v, std::f64::consts::E, epsilon = 1e-15);
        assert_eq!(j, 1.0);
        let (v, j) = positive_transform(-3.0).unwrap();
        assert_abs_diff_eq!(v, 0.049_787_068_4, epsilon = 1e-9);
        assert_eq!(j, -3.0);
        assert!(positive_transform(f64::NAN).is_err());
    }

    #[test]
    fn cpc_examples() {
        let (l, _) = cpc_to_cholesky(&[0.0], 2).unwrap();
        assert_eq!(l.correlation(), vec![1.0, 0.0, 0.0, 1.0]);
        let (l, _) = cpc_to_cholesky(&[0.5_f64.atanh()], 2).unwrap();
        assert_abs_diff_eq!(l.correlation()[1], 0.5, epsilon = 1e-9);
        assert!(cpc_to_cholesky(&[0.0, 1.0], 2).is_err());
        assert!(cpc_to_cholesky(&[f64::NAN], 2).is_err());
        let (l, j) = cpc_to_cholesky(&[], 1).unwrap();
        assert_eq!(l.lower(), &[1.0]);
        assert_eq!(j, 0.0);
    }

    #[test]
    fn cpc_round_trip() {
        let y = [0.3, -0.7, 1.1, 0.2, -0.4, 0.9];
        let (l, _) = cpc_to_cholesky(&y, 4).unwrap();
        let back = cholesky_to_cpc(&l);
        for (a, b) in y.iter().zip(&back) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn cpc_extreme_inputs_stay_valid() {
        let y = [40.0, -40.0, 25.0];
        let (l, j) = cpc_to_cholesky(&y, 3).unwrap_or_else(|e| panic!("{e}"));
        assert!(j.is_finite());
        assert!(CholeskyCorrelation::from_lower(3, l.lower().to_vec()).is_ok());
    }

    #[test]
    fn lkj_flat_at_eta_one() {
        let a = lkj_logdensity(&CholeskyCorrelation::identity(2), 1.0).unwrap();
        let (l, _) = cpc_to_cholesky(&[0.9_f64.atanh()], 2).unwrap();
        let b = lkj_logdensity(&l, 1.0).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        assert!(lkj_logdensity(&l, 0.0).is_err());
    }

    #[test]
    fn lkj_two_by_two_ratio() {
        let at = |r: f64, eta: f64| {
            let l = CholeskyCorrelation::from_correlation(2, &[1.0, r, r, 1.0]).unwrap();
            lkj_logdensity(&l, eta).unwrap()
        };
        assert_abs_diff_eq!(
            (at(0.0, 2.0) - at(0.6, 2.0)).exp(),
            1.0 / 0.64,
            epsilon = 1e-9
        );
        assert!(at(0.0, 4.0) > at(0.8, 4.0));
    }

    #[test]
    fn cholesky_validation() {
        assert!(CholeskyCorrelation::from_lower(2, vec![1.0, 0.0, 0.5, 0.5]).is_err());
        assert!(CholeskyCorrelation::from_lower(2, vec![1.0, 0.1, 0.0, 1.0]).is_err());
        assert!(CholeskyCorrelation::from_correlation(2, &[1.0, 1.2, 1.2, 1.0]).is_err());
    }

    #[test]
    fn logistic_normal_at_uniform_point() {
        let theta = SimplexVector::uniform(3);
        let chol = CholeskyCorrelation::identity(2);
        let v = logistic_normal_logpdf(&theta, &[0.0, 0.0], &[1.0, 1.0], &chol).unwrap();
        let expected = normal_logpdf(&[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap()
            - alr_softmax_log_jacobian(&[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(v, expected, epsilon = 1e-12);
        let boundary = SimplexVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert!(logistic_normal_logpdf(&boundary, &[0.0, 0.0], &[1.0, 1.0], &chol).is_err());
    }

    #[test]
    fn rng_stream_reproduces() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        let mut c = RngStream::new(7, 4);
        let xa: Vec<f64> = (0..16).map(|_| a.standard_normal()).collect();
        let xb: Vec<f64> = (0..16).map(|_| b.standard_normal()).collect();
        let xc: Vec<f64> = (0..16).map(|_| c.standard_normal()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
        let state = a.state();
        let next = a.standard_normal();
        let mut restored = RngStream::from_state(state);
        assert_eq!(restored.standard_normal(), next);
    }
}
