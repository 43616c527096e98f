//! Reparameterized Monte Carlo ELBO and its exact gradient.
//!
//! For fixed standard-normal noise the estimator is a deterministic function
//! of the variational parameters; gradients are derived by hand through the
//! model terms, the constrained transforms and (when present) the amortizer.

use ndarray::{s, Array2, Axis};

use crate::error::{check_len, Error, Result};
use crate::inference::amortizer::{amortizer_input, Mlp};
use crate::inference::state::{GaussianBlock, GlobalBlocks, LocalFamily, VariationalState, GLOBAL_BLOCK_NAMES};
use crate::inference::FitConfig;
use crate::kernel::{cpc_to_cholesky, cpc_to_cholesky_backward, RngStream, LN_2PI};
use crate::model::{data_term_grad, log_prior_globals_grad, BatchView, Dataset, GlobalGrad, GlobalParams, ModelSpec};

/// Standard-normal draws for one Monte Carlo sample.
///
/// Row j of `local` belongs to the j-th image of the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub b: Array2<f64>,
    pub gamma: Array2<f64>,
    pub log_sigma: Array2<f64>,
    pub cpc: Array2<f64>,
    pub local: Array2<f64>,
}

impl Noise {
    pub fn zeros(spec: &ModelSpec, batch_rows: usize) -> Self {
        let g = GlobalBlocks::zeros(spec);
        Noise {
            b: Array2::zeros(g.b.shape()),
            gamma: Array2::zeros(g.gamma.shape()),
            log_sigma: Array2::zeros(g.log_sigma.shape()),
            cpc: Array2::zeros(g.cpc.shape()),
            local: Array2::zeros((batch_rows, spec.k_free())),
        }
    }

    /// Fills globals first (B, Γ, log σ, cpc), then the local rows.
    pub fn draw(spec: &ModelSpec, batch_rows: usize, rng: &mut RngStream) -> Self {
        let mut noise = Noise::zeros(spec, batch_rows);
        for m in [
            &mut noise.b,
            &mut noise.gamma,
            &mut noise.log_sigma,
            &mut noise.cpc,
            &mut noise.local,
        ] {
            rng.fill_standard_normal(m.as_slice_mut().expect("standard layout"));
        }
        noise
    }

    /// Same global noise, local rows taken at `positions`.
    pub fn select_local(&self, positions: &[usize]) -> Noise {
        Noise {
            local: self.local.select(Axis(0), positions),
            ..self.clone()
        }
    }

    fn globals(&self) -> [&Array2<f64>; 4] {
        [&self.b, &self.gamma, &self.log_sigma, &self.cpc]
    }
}

/// One draw of every parameter, pushed to its constrained space.
#[derive(Debug, Clone)]
pub struct ParameterDraw {
    pub params: GlobalParams,
    /// Unconstrained proportions of the batch images.
    pub zeta: Array2<f64>,
    /// log-Jacobian of the σ_θ and Ω_θ transforms.
    pub log_jacobian: f64,
}

/// Gradient w.r.t. the variational parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalGrad {
    /// `None` when the globals were held fixed.
    pub globals: Option<GlobalBlocks>,
    pub local: LocalGrad,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LocalGrad {
    /// Gradients for the listed image rows; all other rows are exactly zero.
    Rows { rows: Vec<usize>, block: GaussianBlock },
    Amortized(Mlp),
}

struct GlobalDraw {
    params: GlobalParams,
    cpc: Vec<f64>,
    log_jacobian: f64,
}

fn draw_globals(globals: &GlobalBlocks, spec: &ModelSpec, noise: &Noise) -> Result<GlobalDraw> {
    let km = spec.k_free();
    let b = globals.b.draw(&noise.b);
    let gamma = globals.gamma.draw(&noise.gamma);
    let u = globals.log_sigma.draw(&noise.log_sigma);
    let y = globals.cpc.draw(&noise.cpc);
    let sigma: Vec<f64> = u.iter().map(|v| v.exp()).collect();
    let y: Vec<f64> = y.iter().copied().collect();
    let (chol, jac_cpc) = cpc_to_cholesky(&y, km)?;
    if sigma.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::NonFinite("log_sigma_theta".into()));
    }
    Ok(GlobalDraw {
        params: GlobalParams {
            b,
            gamma,
            sigma_theta: sigma,
            chol_omega: chol,
        },
        cpc: y,
        log_jacobian: u.sum() + jac_cpc,
    })
}

/// (λ, ρ) rows of the local factor for the batch.
fn local_params(
    local: &LocalFamily,
    data: &Dataset,
    rows: &[usize],
) -> (GaussianBlock, Option<(Array2<f64>, Vec<Array2<f64>>)>) {
    match local {
        LocalFamily::Explicit(block) => (block.select_rows(rows), None),
        LocalFamily::Amortized(mlp) => {
            let z = data.embeddings.select(Axis(0), rows);
            let x = data.design.select(Axis(0), rows);
            let input = amortizer_input(z.view(), x.view());
            let (out, acts) = mlp.forward_cached(input.view());
            let km = out.ncols() / 2;
            let block = GaussianBlock {
                loc: out.slice(s![.., ..km]).to_owned(),
                log_scale: out.slice(s![.., km..]).to_owned(),
            };
            (block, Some((out, acts)))
        }
    }
}

fn check_noise(state: &VariationalState, rows: usize, noise: &Noise) -> Result<()> {
    for ((block, eps), name) in state
        .globals
        .blocks()
        .iter()
        .zip(noise.globals())
        .zip(GLOBAL_BLOCK_NAMES)
    {
        if block.shape() != eps.dim() {
            return Err(Error::InvalidInput(format!("noise for {name} has the wrong shape")));
        }
    }
    check_len("local noise rows", rows, noise.local.nrows())?;
    let km = state.globals.gamma.shape().1;
    check_len("local noise columns", km, noise.local.ncols())?;
    Ok(())
}

/// ζ = λ + ν ⊙ ε for every block, with constrained blocks transformed.
pub fn sample_variational(
    state: &VariationalState,
    spec: &ModelSpec,
    data: &Dataset,
    rows: &[usize],
    noise: &Noise,
) -> Result<ParameterDraw> {
    check_noise(state, rows.len(), noise)?;
    let g = draw_globals(&state.globals, spec, noise)?;
    let (local, _) = local_params(&state.local, data, rows);
    Ok(ParameterDraw {
        params: g.params,
        zeta: local.draw(&noise.local),
        log_jacobian: g.log_jacobian,
    })
}

/// −log q at a reparameterized point: Σ (½ log 2π + ρ + ½ ε²).
fn neg_log_q(log_scale: &Array2<f64>, eps: &Array2<f64>) -> f64 {
    log_scale
        .iter()
        .zip(eps.iter())
        .map(|(r, e)| 0.5 * LN_2PI + r + 0.5 * e * e)
        .sum()
}

/// Chains d/d(sample) into (d/dλ, d/dρ), adding `entropy_weight` to d/dρ.
fn chain_block(block: &GaussianBlock, eps: &Array2<f64>, g_sample: &Array2<f64>, entropy_weight: f64) -> GaussianBlock {
    let mut g_log_scale = g_sample * &block.log_scale.mapv(f64::exp) * eps;
    g_log_scale += entropy_weight;
    GaussianBlock {
        loc: g_sample.clone(),
        log_scale: g_log_scale,
    }
}

fn add_scaled(acc: &mut GaussianBlock, g: &GaussianBlock, w: f64) {
    acc.loc.scaled_add(w, &g.loc);
    acc.log_scale.scaled_add(w, &g.log_scale);
}

/// ELBO estimate and gradient with the globals either drawn from the
/// variational family or held fixed (local refits).
pub(crate) fn elbo_core(
    data: &Dataset,
    rows: &[usize],
    state: &VariationalState,
    spec: &ModelSpec,
    scale: f64,
    noises: &[Noise],
    fixed: Option<&GlobalParams>,
) -> Result<(f64, VariationalGrad)> {
    if noises.is_empty() {
        return Err(Error::InvalidParameter("need at least one Monte Carlo sample".into()));
    }
    if rows.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    check_len("embedding dimension", spec.d, data.embeddings.ncols())?;
    check_len("covariate count", spec.p, data.design.ncols())?;
    if let Some(&bad) = rows.iter().find(|&&r| r >= data.len()) {
        return Err(Error::InvalidInput(format!("batch row {bad} out of range")));
    }
    let km = spec.k_free();
    let weight = 1.0 / noises.len() as f64;
    let z = data.embeddings.select(Axis(0), rows);
    let x = data.design.select(Axis(0), rows);
    let batch = BatchView {
        embeddings: z.view(),
        design: x.view(),
    };
    let (local, cache) = local_params(&state.local, data, rows);
    let local_scale = local.scale();

    let mut value = 0.0;
    let mut g_globals = fixed.is_none().then(|| GlobalBlocks::zeros(spec));
    let mut g_local = GaussianBlock::zeros(rows.len(), km);

    for noise in noises {
        check_noise(state, rows.len(), noise)?;
        let draw = match fixed {
            None => Some(draw_globals(&state.globals, spec, noise)?),
            Some(_) => None,
        };
        let params = match (&draw, fixed) {
            (Some(d), _) => &d.params,
            (None, Some(p)) => p,
            (None, None) => unreachable!(),
        };
        let zeta = &local.loc + &(&local_scale * &noise.local);
        let mut gg = GlobalGrad::zeros(spec);
        let mut gz = Array2::zeros((rows.len(), km));
        let mut v = data_term_grad(batch, zeta.view(), params, scale, &mut gg, &mut gz);
        v += scale * neg_log_q(&local.log_scale, &noise.local);
        add_scaled(&mut g_local, &chain_block(&local, &noise.local, &gz, scale), weight);

        if let (Some(d), Some(acc)) = (&draw, g_globals.as_mut()) {
            v += log_prior_globals_grad(&d.params, spec, &mut gg)?;
            v += d.log_jacobian;
            let blocks = &state.globals;
            for (block, eps) in blocks.blocks().iter().zip(noise.globals()) {
                v += neg_log_q(&block.log_scale, eps);
            }
            add_scaled(&mut acc.b, &chain_block(&blocks.b, &noise.b, &gg.b, 1.0), weight);
            add_scaled(&mut acc.gamma, &chain_block(&blocks.gamma, &noise.gamma, &gg.gamma, 1.0), weight);
            // σ = exp(u), log-Jacobian Σu
            let g_u: Vec<f64> = gg
                .sigma
                .iter()
                .zip(&d.params.sigma_theta)
                .map(|(g, s)| g * s + 1.0)
                .collect();
            let g_u = Array2::from_shape_vec((1, km), g_u).expect("shape");
            add_scaled(&mut acc.log_sigma, &chain_block(&blocks.log_sigma, &noise.log_sigma, &g_u, 1.0), weight);
            let g_y = cpc_to_cholesky_backward(&d.cpc, km, &gg.lower, 1.0);
            let g_y = Array2::from_shape_vec((1, g_y.len()), g_y).expect("shape");
            add_scaled(&mut acc.cpc, &chain_block(&blocks.cpc, &noise.cpc, &g_y, 1.0), weight);
        }
        value += weight * v;
    }

    if !value.is_finite() {
        return Err(Error::NonFinite("ELBO estimate".into()));
    }
    if let Some(g) = &g_globals {
        for (block, name) in g.blocks().iter().zip(GLOBAL_BLOCK_NAMES) {
            if block.loc.iter().chain(block.log_scale.iter()).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
    }
    if g_local.loc.iter().chain(g_local.log_scale.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gradient of zeta".into()));
    }

    let local_grad = match (&state.local, cache) {
        (LocalFamily::Explicit(_), _) => LocalGrad::Rows {
            rows: rows.to_vec(),
            block: g_local,
        },
        (LocalFamily::Amortized(mlp), Some((_, acts))) => {
            let grad_out = ndarray::concatenate(Axis(1), &[g_local.loc.view(), g_local.log_scale.view()])
                .expect("row counts agree");
            let g = mlp.backward(&acts, grad_out);
            if g.slices().iter().any(|s| s.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite("gradient of amortizer".into()));
            }
            LocalGrad::Amortized(g)
        }
        (LocalFamily::Amortized(_), None) => unreachable!("amortized forward always caches"),
    };
    Ok((
        value,
        VariationalGrad {
            globals: g_globals,
            local: local_grad,
        },
    ))
}

/// ELBO estimate and its gradient for a batch under common random numbers.
///
/// `scale` multiplies every per-image term (N/|batch| for minibatches, 1
/// for the full data); the estimate averages over the given noise draws.
pub fn elbo_value_and_grad(
    data: &Dataset,
    rows: &[usize],
    state: &VariationalState,
    spec: &ModelSpec,
    scale: f64,
    noises: &[Noise],
) -> Result<(f64, VariationalGrad)> {
    elbo_core(data, rows, state, spec, scale, noises, None)
}

/// Unbiased ELBO estimate on a uniformly drawn minibatch.
pub fn elbo_estimate(
    data: &Dataset,
    state: &VariationalState,
    spec: &ModelSpec,
    config: &FitConfig,
    rng: &mut RngStream,
) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let n = data.len();
    let size = config.batch_size.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let mut rows = idx[..size].to_vec();
    rows.sort_unstable();
    let noises: Vec<Noise> = (0..config.mc_samples)
        .map(|_| Noise::draw(spec, rows.len(), rng))
        .collect();
    let scale = n as f64 / size as f64;
    Ok(elbo_core(data, &rows, state, spec, scale, &noises, None)?.0)
}
