//! Intruder tasks for human validation of topics, and their scoring.
//!
//! A task shows three images from one topic and one intruder. Responses
//! are scored with a hierarchical logistic regression
//! P(correct) = logit⁻¹(α + ψ_m + κ_{j,l}), where m is the model, j the
//! evaluator and l the position of the task in the evaluator's sequence.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{adam_update, AdamConfig};
use crate::kernel::RngStream;
use crate::quantities::top_images;

/// Number of order-index levels an evaluator effect is split into.
pub const ORDER_LEVELS: usize = 3;
const PRIOR_SD: f64 = 2.5;

/// Topic proportions of one fitted model, with the ids of its images.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTheta {
    pub model: String,
    pub image_ids: Vec<String>,
    pub theta: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntrusionTask {
    pub task_id: String,
    pub model: String,
    pub topic: usize,
    pub in_topic: [String; 3],
    pub intruder: String,
    pub intruder_topic: usize,
    /// `order[p]` is the item at position p + 1: 0..=2 index `in_topic`, 3 is the intruder.
    pub order: [usize; 4],
}

impl IntrusionTask {
    /// Image ids in presentation order.
    pub fn presented(&self) -> [&str; 4] {
        self.order
            .map(|o| if o == 3 { self.intruder.as_str() } else { self.in_topic[o].as_str() })
    }

    /// 1-based position of the intruder.
    pub fn intruder_position(&self) -> usize {
        self.order.iter().position(|&o| o == 3).expect("valid order") + 1
    }

    pub fn validate(&self) -> Result<()> {
        let mut sorted = self.order;
        sorted.sort_unstable();
        if sorted != [0, 1, 2, 3] {
            return Err(Error::InvalidInput(format!("task {}: order is not a permutation", self.task_id)));
        }
        if self.topic == self.intruder_topic {
            return Err(Error::InvalidInput(format!("task {}: intruder shares the topic", self.task_id)));
        }
        let imgs = self.presented();
        for a in 0..4 {
            if imgs[a + 1..].contains(&imgs[a]) {
                return Err(Error::InvalidInput(format!("task {}: repeated image", self.task_id)));
            }
        }
        Ok(())
    }
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Draws `tasks_per_model` tasks per model, cycling through topics so that
/// every topic gets the same number of tasks (up to one).
pub fn intrusion_generate(models: &[ModelTheta], tasks_per_model: usize, rng: &mut RngStream) -> Result<Vec<IntrusionTask>> {
    let mut tasks = Vec::with_capacity(models.len() * tasks_per_model);
    for m in models {
        let (n, k) = m.theta.dim();
        if m.image_ids.len() != n {
            return Err(Error::DimensionMismatch {
                context: "image ids",
                expected: n,
                found: m.image_ids.len(),
            });
        }
        if k < 2 {
            return Err(Error::InvalidInput(format!("model {}: intrusion needs at least 2 topics", m.model)));
        }
        let decile = n.div_ceil(10);
        let top: Vec<Vec<usize>> = (0..k).map(|t| top_images(m.theta.view(), t, decile)).collect::<Result<_>>()?;
        let medians: Vec<f64> = (0..k)
            .map(|t| {
                let mut col = m.theta.column(t).to_vec();
                col.sort_by(f64::total_cmp);
                quantile_sorted(&col, 0.5)
            })
            .collect();

        for t in 0..tasks_per_model {
            let topic = t % k;
            if top[topic].len() < 3 {
                return Err(Error::InvalidInput(format!(
                    "model {}: topic {topic} lacks candidates (top decile has {} images)",
                    m.model,
                    top[topic].len()
                )));
            }
            let mut pool = top[topic].clone();
            for a in 0..3 {
                let j = a + rng.below(pool.len() - a);
                pool.swap(a, j);
            }
            let chosen = [pool[0], pool[1], pool[2]];
            let candidates: Vec<Vec<usize>> = (0..k)
                .map(|j| {
                    if j == topic {
                        return Vec::new();
                    }
                    top[j]
                        .iter()
                        .copied()
                        .filter(|&i| m.theta[[i, topic]] < medians[topic] && !chosen.contains(&i))
                        .collect()
                })
                .collect();
            let usable: Vec<usize> = (0..k).filter(|&j| !candidates[j].is_empty()).collect();
            if usable.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "model {}: topic {topic} lacks intruder candidates",
                    m.model
                )));
            }
            let intruder_topic = usable[rng.below(usable.len())];
            let pick = &candidates[intruder_topic];
            let intruder = pick[rng.below(pick.len())];
            let mut order = [0, 1, 2, 3];
            rng.shuffle(&mut order);
            tasks.push(IntrusionTask {
                task_id: format!("{}-{}", m.model, t + 1),
                model: m.model.clone(),
                topic,
                in_topic: chosen.map(|i| m.image_ids[i].clone()),
                intruder: m.image_ids[intruder].clone(),
                intruder_topic,
                order,
            });
        }
    }
    Ok(tasks)
}

/// One task per line as JSON.
pub fn write_tasks(path: &Path, tasks: &[IntrusionTask]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for t in tasks {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_tasks(path: &Path) -> Result<Vec<IntrusionTask>> {
    let mut tasks = Vec::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let task: IntrusionTask = serde_json::from_str(&line)?;
        task.validate()?;
        tasks.push(task);
    }
    Ok(tasks)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntrusionResponse {
    pub task_id: String,
    pub evaluator: String,
    pub model: String,
    /// In 1..=3.
    pub order_index: usize,
    /// In 1..=4.
    pub chosen_position: usize,
    pub correct: bool,
}

#[derive(Deserialize)]
struct ResponseRow {
    task_id: String,
    evaluator: String,
    model: String,
    order_index: usize,
    chosen_position: usize,
}

/// Reads responses and marks each correct when the chosen position is the
/// intruder's position in its task.
pub fn read_responses(path: &Path, tasks: &[IntrusionTask]) -> Result<Vec<IntrusionResponse>> {
    let by_id: BTreeMap<&str, &IntrusionTask> = tasks.iter().map(|t| (t.task_id.as_str(), t)).collect();
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for (line, row) in reader.deserialize::<ResponseRow>().enumerate() {
        let row = row?;
        let task = by_id
            .get(row.task_id.as_str())
            .ok_or_else(|| Error::InvalidInput(format!("response {}: unknown task {}", line + 1, row.task_id)))?;
        if task.model != row.model {
            return Err(Error::InvalidInput(format!(
                "response {}: task {} belongs to model {}, not {}",
                line + 1,
                row.task_id,
                task.model,
                row.model
            )));
        }
        if !(1..=ORDER_LEVELS).contains(&row.order_index) || !(1..=4).contains(&row.chosen_position) {
            return Err(Error::InvalidInput(format!(
                "response {}: order index or chosen position out of range",
                line + 1
            )));
        }
        out.push(IntrusionResponse {
            correct: row.chosen_position == task.intruder_position(),
            task_id: row.task_id,
            evaluator: row.evaluator,
            model: row.model,
            order_index: row.order_index,
            chosen_position: row.chosen_position,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntrusionFitConfig {
    pub iterations: usize,
    pub mc_samples: usize,
    pub adam: AdamConfig,
    /// Posterior draws kept for prediction.
    pub draws: usize,
}

impl Default for IntrusionFitConfig {
    fn default() -> Self {
        IntrusionFitConfig {
            iterations: 3000,
            mc_samples: 4,
            adam: AdamConfig {
                learning_rate: 0.02,
                ..AdamConfig::default()
            },
            draws: 4000,
        }
    }
}

/// Mean-field Gaussian posterior over the unconstrained coordinates
/// (α, ψ_1..ψ_{M−1}, log σ_κ, u) with κ = σ_κ·u and ψ_M = −Σ ψ_m.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrusionPosterior {
    pub models: Vec<String>,
    pub evaluators: Vec<String>,
    pub loc: Vec<f64>,
    pub log_scale: Vec<f64>,
    /// Rows are draws of (α, ψ_1, …, ψ_M).
    pub draws: Array2<f64>,
    /// All responses correct or all incorrect.
    pub separation: bool,
    pub elbo_trace: Vec<f64>,
}

impl IntrusionPosterior {
    pub fn model_index(&self, model: &str) -> Result<usize> {
        self.models
            .iter()
            .position(|m| m == model)
            .ok_or_else(|| Error::InvalidInput(format!("unknown model {model:?}")))
    }

    pub fn sigma_kappa_median(&self) -> f64 {
        self.loc[self.models.len()].exp()
    }
}

struct Coded {
    model: Vec<usize>,
    cell: Vec<usize>,
    y: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log1p_exp(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Full ψ vector from the free coordinates.
fn expand_psi(free: &[f64], m: usize) -> Vec<f64> {
    let mut psi = free.to_vec();
    if m > 0 {
        psi.push(-free.iter().sum::<f64>());
    }
    psi
}

/// Log joint (up to a constant) at unconstrained `w` and its gradient.
fn log_joint(w: &[f64], data: &Coded, m: usize, cells: usize) -> (f64, Vec<f64>) {
    let alpha = w[0];
    let psi = expand_psi(&w[1..m], m);
    let s = w[m];
    let sigma = s.exp();
    let u = &w[m + 1..m + 1 + cells];
    let var = PRIOR_SD * PRIOR_SD;

    let mut grad = vec![0.0; w.len()];
    let mut lp = 0.0;
    let mut d_model = vec![0.0; m];
    let mut d_sigma = 0.0;
    for i in 0..data.y.len() {
        let eta = alpha + psi[data.model[i]] + sigma * u[data.cell[i]];
        lp += data.y[i] * eta - log1p_exp(eta);
        let r = data.y[i] - sigmoid(eta);
        grad[0] += r;
        d_model[data.model[i]] += r;
        grad[m + 1 + data.cell[i]] += sigma * r;
        d_sigma += r * u[data.cell[i]];
    }
    lp -= 0.5 * alpha * alpha / var;
    grad[0] -= alpha / var;
    lp -= 0.5 * psi.iter().map(|p| p * p).sum::<f64>() / var;
    let last = m - 1;
    for a in 0..last {
        grad[1 + a] += d_model[a] - d_model[last] - psi[a] / var + psi[last] / var;
    }
    // half-normal(0, 1) on σ_κ plus the log-Jacobian s
    lp += -0.5 * sigma * sigma + s;
    grad[m] += sigma * d_sigma - sigma * sigma + 1.0;
    for (c, &uc) in u.iter().enumerate() {
        lp -= 0.5 * uc * uc;
        grad[m + 1 + c] -= uc;
    }
    (lp, grad)
}

/// Fits the scoring regression by stochastic variational inference.
pub fn intrusion_fit(
    responses: &[IntrusionResponse],
    config: &IntrusionFitConfig,
    rng: &mut RngStream,
) -> Result<IntrusionPosterior> {
    if responses.is_empty() {
        return Err(Error::InvalidInput("no intrusion responses".into()));
    }
    if config.iterations == 0 || config.mc_samples == 0 || config.draws == 0 {
        return Err(Error::InvalidParameter("iterations, mc_samples and draws must be positive".into()));
    }
    let models: Vec<String> = responses
        .iter()
        .map(|r| r.model.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let evaluators: Vec<String> = responses
        .iter()
        .map(|r| r.evaluator.clone())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut data = Coded {
        model: Vec::with_capacity(responses.len()),
        cell: Vec::with_capacity(responses.len()),
        y: Vec::with_capacity(responses.len()),
    };
    for r in responses {
        if !(1..=ORDER_LEVELS).contains(&r.order_index) {
            return Err(Error::InvalidInput(format!("order index {} out of range", r.order_index)));
        }
        let j = evaluators.binary_search(&r.evaluator).expect("collected");
        data.model.push(models.binary_search(&r.model).expect("collected"));
        data.cell.push(j * ORDER_LEVELS + r.order_index - 1);
        data.y.push(if r.correct { 1.0 } else { 0.0 });
    }
    let n_correct = data.y.iter().filter(|&&y| y == 1.0).count();
    let separation = n_correct == 0 || n_correct == data.y.len();
    if separation {
        log::warn!("intrusion responses are all correct or all incorrect; estimates rest on the priors");
    }

    let m = models.len();
    let cells = evaluators.len() * ORDER_LEVELS;
    let dim = m + 1 + cells;
    let mut loc = vec![0.0f64; dim];
    let mut log_scale = vec![-1.0f64; dim];
    let (mut m1, mut v1) = (vec![0.0; dim], vec![0.0; dim]);
    let (mut m2, mut v2) = (vec![0.0; dim], vec![0.0; dim]);
    let mut eps = vec![0.0; dim];
    let mut w = vec![0.0; dim];
    let mut elbo_trace = Vec::new();
    for t in 1..=config.iterations {
        let mut g_loc = vec![0.0; dim];
        let mut g_ls = vec![0.0; dim];
        let mut elbo = 0.0;
        for _ in 0..config.mc_samples {
            rng.fill_standard_normal(&mut eps);
            for c in 0..dim {
                w[c] = loc[c] + log_scale[c].exp() * eps[c];
            }
            let (lp, g) = log_joint(&w, &data, m, cells);
            elbo += lp;
            for c in 0..dim {
                g_loc[c] += g[c];
                g_ls[c] += g[c] * eps[c] * log_scale[c].exp();
            }
        }
        let s = config.mc_samples as f64;
        g_loc.iter_mut().for_each(|g| *g /= s);
        g_ls.iter_mut().for_each(|g| *g = *g / s + 1.0);
        let elbo = elbo / s + log_scale.iter().sum::<f64>();
        if !elbo.is_finite() {
            return Err(Error::NonFinite(format!("intrusion ELBO at step {t}")));
        }
        elbo_trace.push(elbo);
        adam_update(&mut loc, &g_loc, &mut m1, &mut v1, t as u64, &config.adam);
        adam_update(&mut log_scale, &g_ls, &mut m2, &mut v2, t as u64, &config.adam);
    }

    let mut draws = Array2::zeros((config.draws, 1 + m));
    let mut e = vec![0.0; m];
    for r in 0..config.draws {
        rng.fill_standard_normal(&mut e);
        // α and the free ψ coordinates are the first m entries
        let x: Vec<f64> = (0..m).map(|c| loc[c] + log_scale[c].exp() * e[c]).collect();
        draws[[r, 0]] = x[0];
        for (c, p) in expand_psi(&x[1..], m).into_iter().enumerate() {
            draws[[r, 1 + c]] = p;
        }
    }
    Ok(IntrusionPosterior {
        models,
        evaluators,
        loc,
        log_scale,
        draws,
        separation,
        elbo_trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrusionPrediction {
    pub model: String,
    pub mean: f64,
    pub ci90: (f64, f64),
    pub ci95: (f64, f64),
}

/// Predicted proportion of correct answers for `model` with the evaluator
/// effect set to zero.
pub fn intrusion_predict(post: &IntrusionPosterior, model: &str) -> Result<IntrusionPrediction> {
    let idx = post.model_index(model)?;
    let mut p: Vec<f64> = proportion_draws(post.draws.view(), idx).to_vec();
    let mean = p.iter().sum::<f64>() / p.len() as f64;
    p.sort_by(f64::total_cmp);
    Ok(IntrusionPrediction {
        model: model.to_owned(),
        mean,
        ci90: (quantile_sorted(&p, 0.05), quantile_sorted(&p, 0.95)),
        ci95: (quantile_sorted(&p, 0.025), quantile_sorted(&p, 0.975)),
    })
}

/// logit⁻¹(α + ψ_m) for every stored draw.
pub fn proportion_draws(draws: ArrayView2<f64>, model: usize) -> Array1<f64> {
    draws
        .outer_iter()
        .map(|d| sigmoid(d[0] + d[1 + model]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn coded() -> (Coded, usize, usize) {
        let data = Coded {
            model: vec![0, 1, 2, 1, 0, 2],
            cell: vec![0, 1, 2, 3, 4, 5],
            y: vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0],
        };
        (data, 3, 6)
    }

    #[test]
    fn log_joint_gradient_matches_differences() {
        let (data, m, cells) = coded();
        let w: Vec<f64> = (0..m + 1 + cells).map(|c| 0.3 * ((c * 7 % 5) as f64 - 2.0)).collect();
        let (_, g) = log_joint(&w, &data, m, cells);
        let h = 1e-6;
        for c in 0..w.len() {
            let mut up = w.clone();
            let mut dn = w.clone();
            up[c] += h;
            dn[c] -= h;
            let fd = (log_joint(&up, &data, m, cells).0 - log_joint(&dn, &data, m, cells).0) / (2.0 * h);
            assert!((fd - g[c]).abs() < 1e-6, "coordinate {c}: {fd} vs {}", g[c]);
        }
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert_eq!(quantile_sorted(&v, 0.125), 1.5);
        assert_eq!(quantile_sorted(&v, 1.0), 5.0);
    }
}
