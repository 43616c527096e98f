//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code, clippy::needless_range_loop)]

use ndarray::{array, Array2};
use vstm::inference::{GaussianBlock, LocalFamily, LocalGrad, Mlp, Noise, VariationalGrad, VariationalState};
use vstm::io::{center_embeddings, synth_generate, SynthScheme, SyntheticTruth};
use vstm::kernel::RngStream;
use vstm::{Dataset, ModelSpec};

/// Standard-normal filled matrix.
pub fn normal_matrix(rows: usize, cols: usize, sd: f64, rng: &mut RngStream) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| sd * rng.standard_normal())
}

/// Toy data: N×D embeddings, intercept plus P−1 normal covariates.
pub fn toy_data(n: usize, d: usize, p: usize, rng: &mut RngStream) -> Dataset {
    let z = normal_matrix(n, d, 1.5, rng);
    let mut x = normal_matrix(n, p, 1.0, rng);
    x.column_mut(0).fill(1.0);
    Dataset::new(z, x).unwrap()
}

/// A random state with every location and log-scale perturbed.
pub fn random_state(spec: &ModelSpec, n: usize, amortized: bool, rng: &mut RngStream) -> VariationalState {
    let data = toy_data(n.max(spec.k), spec.d, spec.p, rng);
    let hidden = amortized.then_some((4, 1));
    let mut state = VariationalState::initialize(&data, spec, hidden, rng).unwrap();
    for block in state.globals.blocks_mut() {
        randomize(block, rng);
    }
    match &mut state.local {
        LocalFamily::Explicit(b) => {
            *b = GaussianBlock::zeros(n, spec.k_free());
            randomize(b, rng);
        }
        LocalFamily::Amortized(m) => {
            for l in &mut m.layers {
                l.weight.iter_mut().for_each(|w| *w = 0.4 * rng.standard_normal());
                l.bias.iter_mut().for_each(|w| *w = 0.2 * rng.standard_normal());
            }
        }
    }
    state
}

fn randomize(block: &mut GaussianBlock, rng: &mut RngStream) {
    block.loc.iter_mut().for_each(|v| *v = 0.6 * rng.standard_normal());
    block.log_scale.iter_mut().for_each(|v| *v = -1.0 + 0.3 * rng.standard_normal());
}

/// Mutable views of every scalar parameter, labelled by block.
pub fn parameter_slices(state: &mut VariationalState) -> Vec<(String, &mut [f64])> {
    let mut out: Vec<(String, &mut [f64])> = Vec::new();
    let names = vstm::inference::GLOBAL_BLOCK_NAMES;
    for (block, name) in state.globals.blocks_mut().into_iter().zip(names) {
        out.push((format!("{name}.loc"), block.loc.as_slice_mut().unwrap()));
        out.push((format!("{name}.log_scale"), block.log_scale.as_slice_mut().unwrap()));
    }
    match &mut state.local {
        LocalFamily::Explicit(b) => {
            out.push(("zeta.loc".into(), b.loc.as_slice_mut().unwrap()));
            out.push(("zeta.log_scale".into(), b.log_scale.as_slice_mut().unwrap()));
        }
        LocalFamily::Amortized(m) => {
            for (i, l) in m.layers.iter_mut().enumerate() {
                out.push((format!("omega.layer{i}.weight"), l.weight.as_slice_mut().unwrap()));
                out.push((format!("omega.layer{i}.bias"), l.bias.as_slice_mut().unwrap()));
            }
        }
    }
    out
}

/// The analytic gradient laid out like [`parameter_slices`]; explicit local
/// rows outside the batch are zero.
pub fn gradient_slices(grad: &VariationalGrad, state: &VariationalState) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    let globals = grad.globals.as_ref().expect("globals were not fixed");
    for block in globals.blocks() {
        out.push(block.loc.iter().copied().collect());
        out.push(block.log_scale.iter().copied().collect());
    }
    match (&grad.local, &state.local) {
        (LocalGrad::Rows { rows, block }, LocalFamily::Explicit(s)) => {
            let mut loc = Array2::zeros(s.shape());
            let mut log_scale = Array2::zeros(s.shape());
            for (j, &r) in rows.iter().enumerate() {
                loc.row_mut(r).assign(&block.loc.row(j));
                log_scale.row_mut(r).assign(&block.log_scale.row(j));
            }
            out.push(loc.iter().copied().collect());
            out.push(log_scale.iter().copied().collect());
        }
        (LocalGrad::Amortized(m), LocalFamily::Amortized(_)) => {
            for l in &m.layers {
                out.push(l.weight.iter().copied().collect());
                out.push(l.bias.iter().copied().collect());
            }
        }
        _ => panic!("gradient family does not match the state"),
    }
    out
}

pub fn mlp_param_count(m: &Mlp) -> usize {
    m.parameter_count()
}

/// Relative error with a floor on the denominator, so coordinates whose
/// true derivative is ~0 are judged on absolute error.
pub const REL_ERR_FLOOR: f64 = 1e-2;

pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(REL_ERR_FLOOR)
}

/// Worst relative error of analytic vs central-difference gradients over
/// every coordinate of `state`, with the noise held fixed.
pub fn max_gradient_error(
    data: &Dataset,
    rows: &[usize],
    state: &VariationalState,
    spec: &ModelSpec,
    scale: f64,
    noises: &[Noise],
    h: f64,
) -> (f64, String) {
    let (_, grad) = vstm::inference::elbo_value_and_grad(data, rows, state, spec, scale, noises).unwrap();
    let analytic = gradient_slices(&grad, state);
    let f = |s: &VariationalState| vstm::inference::elbo_value_and_grad(data, rows, s, spec, scale, noises).unwrap().0;
    let mut worst = (0.0, String::new());
    let mut probe = state.clone();
    let n_slices = parameter_slices(&mut probe).len();
    for si in 0..n_slices {
        let len = parameter_slices(&mut probe)[si].1.len();
        for j in 0..len {
            let orig = parameter_slices(&mut probe)[si].1[j];
            parameter_slices(&mut probe)[si].1[j] = orig + h;
            let up = f(&probe);
            parameter_slices(&mut probe)[si].1[j] = orig - h;
            let dn = f(&probe);
            parameter_slices(&mut probe)[si].1[j] = orig;
            let fd = (up - dn) / (2.0 * h);
            let e = rel_err(analytic[si][j], fd);
            if e > worst.0 {
                let name = parameter_slices(&mut probe)[si].0.clone();
                worst = (e, format!("{name}[{j}] analytic {} fd {fd}", analytic[si][j]));
            }
        }
    }
    worst
}

/// The synthetic recovery dataset: K=3, D=16, P=2, σ_θ=0.5, Ω=I and
/// mutually orthogonal topics of norm 8.
pub struct Recovery {
    pub spec: ModelSpec,
    pub data: Dataset,
    pub mean: Array2<f64>,
    pub truth: SyntheticTruth,
}

pub fn recovery_b() -> Array2<f64> {
    let mut b = Array2::zeros((3, 16));
    for k in 0..3 {
        for j in 0..4 {
            b[[k, 4 * k + j]] = 4.0;
        }
    }
    b
}

pub fn recovery_gamma() -> Array2<f64> {
    array![[-1.0, -1.0], [2.0, -2.0]]
}

/// Stream id used to simulate the recovery data.
pub const RECOVERY_DATA_STREAM: u64 = 99;

pub fn recovery_dataset(n: usize, seed: u64) -> Recovery {
    let base = ModelSpec::new(3, 16, 2, vec![1.0; 16]).unwrap();
    let scheme = SynthScheme {
        b: Some(recovery_b()),
        gamma: Some(recovery_gamma()),
        sigma_theta: Some(vec![0.5, 0.5]),
        chol_omega: None,
    };
    let (z, x, truth) = synth_generate(&base, n, &scheme, &mut RngStream::new(seed, RECOVERY_DATA_STREAM)).unwrap();
    let c = center_embeddings(z.view()).unwrap();
    let spec = ModelSpec::new(3, 16, 2, c.sd_scale.to_vec()).unwrap();
    Recovery {
        spec,
        data: Dataset::new(c.centered, x).unwrap(),
        mean: c.mean.insert_axis(ndarray::Axis(0)),
        truth,
    }
}

/// Simulated intrusion responses. Model m answers correctly with
/// probability logit⁻¹(logit(rates[m]) + κ_{j,l}), κ ~ normal(0, sigma_kappa),
/// spread over `evaluators` evaluators and the three order indices.
pub fn simulate_responses(
    rates: &[f64],
    per_model: usize,
    evaluators: usize,
    sigma_kappa: f64,
    rng: &mut RngStream,
) -> Vec<vstm::diagnostics::IntrusionResponse> {
    let kappa: Vec<f64> = (0..evaluators * 3).map(|_| sigma_kappa * rng.standard_normal()).collect();
    let mut out = Vec::new();
    for (m, &rate) in rates.iter().enumerate() {
        let logit = (rate / (1.0 - rate)).ln();
        for i in 0..per_model {
            let j = rng.below(evaluators);
            let l = rng.below(3);
            let p = 1.0 / (1.0 + (-(logit + kappa[j * 3 + l])).exp());
            let correct = rng.uniform() < p;
            out.push(vstm::diagnostics::IntrusionResponse {
                task_id: format!("m{m}-{i}"),
                evaluator: format!("e{j}"),
                model: format!("m{m}"),
                order_index: l + 1,
                chosen_position: if correct { 1 } else { 2 },
                correct,
            });
        }
    }
    out
}
