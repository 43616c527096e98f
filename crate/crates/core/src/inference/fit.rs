use std::time::Instant;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Divergence, Error, Result};
use crate::inference::adam::{adam_step, AdamConfig, AdamMoments};
use crate::inference::amortizer::{amortizer_input, Mlp};
use crate::inference::elbo::{elbo_core, Noise};
use crate::inference::state::{initial_local_block, GaussianBlock, GlobalBlocks, LocalFamily, VariationalState};
use crate::io::digest_matrix;
use crate::kernel::{softmax_with_reference, RngStream};
use crate::model::{Dataset, GlobalParams, ModelSpec};
use crate::quantities::{posterior_means, POSTERIOR_MEAN_DRAWS};

/// Monte Carlo draws behind the reported per-image proportions.
pub const THETA_DRAWS: usize = 256;

pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_LOOP: u64 = 2;
pub(crate) const STREAM_THETA: u64 = 3;
pub(crate) const STREAM_POSTERIOR: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub iterations: usize,
    /// Clamped to N when larger.
    pub batch_size: usize,
    pub mc_samples: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub amortized: bool,
    pub hidden_width: usize,
    pub hidden_depth: usize,
    pub elbo_eval_every: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        FitConfig {
            iterations: 25_000,
            batch_size: 5_280,
            mc_samples: 1,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            seed: 0,
            amortized: false,
            hidden_width: 256,
            hidden_depth: 1,
            elbo_eval_every: 10,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("iterations", self.iterations),
            ("batch_size", self.batch_size),
            ("mc_samples", self.mc_samples),
            ("elbo_eval_every", self.elbo_eval_every),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        if self.amortized && self.hidden_width == 0 && self.hidden_depth > 0 {
            return Err(Error::InvalidParameter("hidden_width must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::InvalidParameter("learning rate and eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidParameter("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDigests {
    pub embeddings: String,
    pub design: String,
}

impl DataDigests {
    pub fn of(data: &Dataset) -> Self {
        DataDigests {
            embeddings: digest_matrix(data.embeddings.view()),
            design: digest_matrix(data.design.view()),
        }
    }
}

/// Everything needed to audit and reproduce a fit.
///
/// Wall-clock time is kept out of the serialized form so that identical runs
/// produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: FitConfig,
    pub spec: ModelSpec,
    pub n_images: usize,
    pub effective_batch_size: usize,
    pub digests: DataDigests,
    pub elbo_trace: Vec<f64>,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub globals: GlobalParams,
    /// N×K posterior-mean proportions.
    pub theta: Array2<f64>,
    /// N×(K−1) variational locations of ζ.
    pub lambda_theta: Array2<f64>,
    pub elbo_trace: Vec<f64>,
    pub manifest: Manifest,
    pub state: VariationalState,
}

/// Optimizer state of a fit in progress.
#[derive(Debug, Clone)]
pub struct FitSession {
    pub spec: ModelSpec,
    pub config: FitConfig,
    pub state: VariationalState,
    pub moments: AdamMoments,
    pub step: usize,
    pub rng: RngStream,
    /// Current epoch's shuffled image order and the position within it.
    pub order: Vec<usize>,
    pub cursor: usize,
    pub trace: Vec<f64>,
    fixed: Option<GlobalParams>,
}

impl FitSession {
    pub fn new(data: &Dataset, spec: &ModelSpec, config: &FitConfig) -> Result<Self> {
        validate_inputs(data, spec, config)?;
        let mut init = RngStream::new(config.seed, STREAM_INIT);
        let amortizer = config.amortized.then_some((config.hidden_width, config.hidden_depth));
        let state = VariationalState::initialize(data, spec, amortizer, &mut init)?;
        Ok(FitSession::from_state(spec.clone(), config.clone(), state, None))
    }

    fn from_state(spec: ModelSpec, config: FitConfig, state: VariationalState, fixed: Option<GlobalParams>) -> Self {
        let moments = AdamMoments::new(&state);
        FitSession {
            spec,
            rng: RngStream::new(config.seed, STREAM_LOOP),
            config,
            state,
            moments,
            step: 0,
            order: Vec::new(),
            cursor: 0,
            trace: Vec::new(),
            fixed,
        }
    }

    /// Rebuilds a session from checkpointed parts.
    #[allow(clippy::too_many_arguments)]
    pub fn restore(
        spec: ModelSpec,
        config: FitConfig,
        state: VariationalState,
        moments: AdamMoments,
        step: usize,
        rng: RngStream,
        order: Vec<usize>,
        cursor: usize,
        trace: Vec<f64>,
    ) -> Self {
        FitSession {
            spec,
            config,
            state,
            moments,
            step,
            rng,
            order,
            cursor,
            trace,
            fixed: None,
        }
    }

    /// Next minibatch (sorted): consecutive chunks of a per-epoch shuffle;
    /// a tail shorter than the batch size is dropped.
    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let size = self.config.batch_size.min(n);
        if size == n {
            return (0..n).collect();
        }
        if self.order.len() != n || self.cursor + size > n {
            self.order = (0..n).collect();
            self.rng.shuffle(&mut self.order);
            self.cursor = 0;
        }
        let mut rows = self.order[self.cursor..self.cursor + size].to_vec();
        self.cursor += size;
        rows.sort_unstable();
        rows
    }

    /// One stochastic gradient step; returns the ELBO estimate at the
    /// pre-update state.
    pub fn step(&mut self, data: &Dataset) -> Result<f64> {
        let n = data.len();
        let rows = self.next_batch(n);
        let scale = n as f64 / rows.len() as f64;
        let noises: Vec<Noise> = (0..self.config.mc_samples)
            .map(|_| match self.fixed {
                None => Noise::draw(&self.spec, rows.len(), &mut self.rng),
                Some(_) => {
                    let mut noise = Noise::zeros(&self.spec, rows.len());
                    self.rng
                        .fill_standard_normal(noise.local.as_slice_mut().expect("standard layout"));
                    noise
                }
            })
            .collect();
        let result = elbo_core(data, &rows, &self.state, &self.spec, scale, &noises, self.fixed.as_ref());
        let (value, grad) = match result {
            Ok(v) => v,
            Err(Error::NonFinite(block)) => {
                return Err(Error::Divergence(Box::new(Divergence {
                    step: self.step + 1,
                    block,
                    last_state: self.state.clone(),
                })))
            }
            Err(e) => return Err(e),
        };
        adam_step(&mut self.state, &grad, &mut self.moments, &self.config.adam())?;
        self.step += 1;
        if self.step.is_multiple_of(self.config.elbo_eval_every) {
            self.trace.push(value);
        }
        Ok(value)
    }

    /// Steps until `config.iterations` have been taken.
    pub fn run(&mut self, data: &Dataset) -> Result<()> {
        while self.step < self.config.iterations {
            self.step(data)?;
        }
        Ok(())
    }
}

fn validate_inputs(data: &Dataset, spec: &ModelSpec, config: &FitConfig) -> Result<()> {
    spec.validate()?;
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("no images to fit".into()));
    }
    crate::error::check_len("embedding dimension", spec.d, data.embeddings.ncols())?;
    crate::error::check_len("covariate count", spec.p, data.design.ncols())?;
    if data.embeddings.iter().chain(data.design.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input data".into()));
    }
    Ok(())
}

/// Variational (λ, ρ) rows of ζ for every image.
pub fn local_factors(state: &VariationalState, data: &Dataset) -> GaussianBlock {
    match &state.local {
        LocalFamily::Explicit(block) => block.clone(),
        LocalFamily::Amortized(mlp) => amortized_factors(mlp, data),
    }
}

fn amortized_factors(mlp: &Mlp, data: &Dataset) -> GaussianBlock {
    let km = mlp.output_dim() / 2;
    let n = data.len();
    let mut block = GaussianBlock::zeros(n, km);
    const CHUNK: usize = 4096;
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let input = amortizer_input(
            data.embeddings.select(Axis(0), &rows).view(),
            data.design.select(Axis(0), &rows).view(),
        );
        let out = mlp.forward(input.view());
        block
            .loc
            .slice_mut(ndarray::s![start..end, ..])
            .assign(&out.slice(ndarray::s![.., ..km]));
        block
            .log_scale
            .slice_mut(ndarray::s![start..end, ..])
            .assign(&out.slice(ndarray::s![.., km..]));
        start = end;
    }
    block
}

/// Monte Carlo mean of softmax([ζ, 0]) under q(ζ_i) for every row.
pub fn theta_posterior_mean(local: &GaussianBlock, draws: usize, rng: &mut RngStream) -> Array2<f64> {
    let (n, km) = local.shape();
    let mut theta = Array2::zeros((n, km + 1));
    let mut eps = vec![0.0; km];
    let mut zeta = vec![0.0; km];
    let mut out = vec![0.0; km + 1];
    for i in 0..n {
        let loc = local.loc.row(i);
        let scale: Vec<f64> = local.log_scale.row(i).iter().map(|r| r.exp()).collect();
        let mut acc = theta.row_mut(i);
        for _ in 0..draws {
            rng.fill_standard_normal(&mut eps);
            for k in 0..km {
                zeta[k] = loc[k] + scale[k] * eps[k];
            }
            softmax_with_reference(&zeta, &mut out);
            for (a, o) in acc.iter_mut().zip(&out) {
                *a += o;
            }
        }
        acc.mapv_inplace(|v| v / draws as f64);
    }
    theta
}

fn finish(data: &Dataset, session: FitSession, started: Instant) -> Result<FitResult> {
    let FitSession {
        spec, config, state, trace, ..
    } = session;
    let mut post_rng = RngStream::new(config.seed, STREAM_POSTERIOR);
    let globals = posterior_means(&state, &spec, POSTERIOR_MEAN_DRAWS, &mut post_rng)?;
    let local = local_factors(&state, data);
    let mut theta_rng = RngStream::new(config.seed, STREAM_THETA);
    let theta = theta_posterior_mean(&local, THETA_DRAWS, &mut theta_rng);
    let manifest = Manifest {
        tool: "vstm".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        effective_batch_size: config.batch_size.min(data.len()),
        n_images: data.len(),
        digests: DataDigests::of(data),
        elbo_trace: trace.clone(),
        config,
        spec,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    Ok(FitResult {
        globals,
        theta,
        lambda_theta: local.loc,
        elbo_trace: trace,
        manifest,
        state,
    })
}

/// Fits the model with doubly stochastic variational inference.
///
/// The embeddings are expected to be mean-centered. All randomness derives
/// from `config.seed`.
pub fn fit(data: &Dataset, spec: &ModelSpec, config: &FitConfig) -> Result<FitResult> {
    let started = Instant::now();
    let mut session = FitSession::new(data, spec, config)?;
    session.run(data)?;
    finish(data, session, started)
}

/// Continues a restored session to `config.iterations` and summarizes it.
pub fn resume(data: &Dataset, mut session: FitSession) -> Result<FitResult> {
    let started = Instant::now();
    validate_inputs(data, &session.spec, &session.config)?;
    session.state.validate(&session.spec, data.len())?;
    session.run(data)?;
    finish(data, session, started)
}

/// Per-image results of a local refit.
#[derive(Debug, Clone)]
pub struct LocalFit {
    pub theta: Array2<f64>,
    pub lambda_theta: Array2<f64>,
    pub elbo_trace: Vec<f64>,
}

/// Optimizes only the per-image factors of new images with the globals held
/// at `globals`. An amortizer, when given, provides the starting locations.
pub fn refit_local(
    data: &Dataset,
    spec: &ModelSpec,
    globals: &GlobalParams,
    config: &FitConfig,
    amortizer: Option<&Mlp>,
) -> Result<LocalFit> {
    validate_inputs(data, spec, config)?;
    globals.validate(spec)?;
    let mut init = RngStream::new(config.seed, STREAM_INIT);
    let local = match amortizer {
        Some(mlp) => amortized_factors(mlp, data),
        None => initial_local_block(data.embeddings.view(), globals.b.view(), &mut init),
    };
    let state = VariationalState {
        globals: GlobalBlocks::zeros(spec),
        local: LocalFamily::Explicit(local),
    };
    let mut local_config = config.clone();
    local_config.amortized = false;
    let mut session = FitSession::from_state(spec.clone(), local_config, state, Some(globals.clone()));
    session.run(data)?;
    let local = local_factors(&session.state, data);
    let mut theta_rng = RngStream::new(config.seed, STREAM_THETA);
    let theta = theta_posterior_mean(&local, THETA_DRAWS, &mut theta_rng);
    Ok(LocalFit {
        theta,
        lambda_theta: local.loc,
        elbo_trace: session.trace,
    })
}
