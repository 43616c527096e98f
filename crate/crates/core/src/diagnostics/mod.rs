//! Model-selection metrics and intrusion-task scoring.

pub mod intrusion;

pub use intrusion::{
    intrusion_fit, intrusion_generate, intrusion_predict, proportion_draws, read_responses, read_tasks, write_tasks, IntrusionFitConfig,
    IntrusionPosterior, IntrusionPrediction, IntrusionResponse, IntrusionTask, ModelTheta,
};

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::inference::{fit, refit_local, FitConfig, LocalFamily};
use crate::io::align::cosine;
use crate::kernel::{RngStream, LN_2PI};
use crate::model::{Dataset, ModelSpec};
use crate::quantities::top_images;

pub const DEFAULT_FOLDS: usize = 5;
pub const DEFAULT_COHERENCE_COUNT: usize = 20;
const STREAM_CV: u64 = 5;

/// Assignment of images to cross-validation folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvPlan {
    pub n_folds: usize,
    /// Fold id of every image.
    pub folds: Vec<usize>,
    pub seed: u64,
}

impl CvPlan {
    /// Shuffles the images and deals them round-robin into folds.
    pub fn new(n: usize, n_folds: usize, seed: u64) -> Result<Self> {
        if n_folds == 0 || n < n_folds {
            return Err(Error::InvalidInput(format!(
                "cannot split {n} images into {n_folds} nonempty folds"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        RngStream::new(seed, STREAM_CV).shuffle(&mut order);
        let mut folds = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            folds[i] = pos % n_folds;
        }
        Ok(CvPlan { n_folds, folds, seed })
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        check_len("fold assignment", n, self.folds.len())?;
        for f in 0..self.n_folds {
            if !self.folds.contains(&f) {
                return Err(Error::InvalidInput(format!("fold {f} is empty")));
            }
        }
        if self.folds.iter().any(|&f| f >= self.n_folds) {
            return Err(Error::InvalidInput("fold id out of range".into()));
        }
        Ok(())
    }

    /// (training rows, held-out rows) of fold `f`.
    pub fn split(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        (0..self.folds.len()).partition(|&i| self.folds[i] != f)
    }
}

/// exp(−Σ_i log p(z_i | θ_i, B) / (N·D)) under the unit-variance likelihood.
pub fn perplexity(z: ArrayView2<f64>, theta: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    check_len("theta rows", z.nrows(), theta.nrows())?;
    check_len("topic count", b.nrows(), theta.ncols())?;
    check_len("embedding dimension", b.ncols(), z.ncols())?;
    let (n, d) = z.dim();
    if n == 0 || d == 0 {
        return Err(Error::InvalidInput("perplexity of an empty set".into()));
    }
    let resid = &z - &theta.dot(&b);
    let ss: f64 = resid.iter().map(|r| r * r).sum();
    let loglik = -0.5 * (n * d) as f64 * LN_2PI - 0.5 * ss;
    Ok((-loglik / (n * d) as f64).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityResult {
    pub per_fold: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across folds (0 for a single fold).
    pub sd: f64,
}

impl PerplexityResult {
    pub fn from_folds(per_fold: Vec<f64>) -> Self {
        let n = per_fold.len() as f64;
        let mean = per_fold.iter().sum::<f64>() / n;
        let sd = if per_fold.len() > 1 {
            (per_fold.iter().map(|p| (p - mean) * (p - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        PerplexityResult { per_fold, mean, sd }
    }
}

/// Held-out perplexity by cross-validation: fit on the other folds, refit
/// the local factors of the held-out fold with the globals frozen at their
/// posterior means, and score the held-out embeddings.
pub fn heldout_perplexity(data: &Dataset, spec: &ModelSpec, config: &FitConfig, plan: &CvPlan) -> Result<PerplexityResult> {
    plan.validate(data.len())?;
    let mut per_fold = Vec::with_capacity(plan.n_folds);
    for f in 0..plan.n_folds {
        let (train_rows, test_rows) = plan.split(f);
        if test_rows.is_empty() {
            return Err(Error::InvalidInput(format!("fold {f} has no images to refit")));
        }
        let train = data.subset(&train_rows);
        let test = data.subset(&test_rows);
        let fitted = fit(&train, spec, config)?;
        let amortizer = match &fitted.state.local {
            LocalFamily::Amortized(m) => Some(m),
            LocalFamily::Explicit(_) => None,
        };
        let local = refit_local(&test, spec, &fitted.globals, config, amortizer)?;
        per_fold.push(perplexity(test.embeddings.view(), local.theta.view(), fitted.globals.b.view())?);
        log::info!("fold {}/{}: perplexity {:.6}", f + 1, plan.n_folds, per_fold[f]);
    }
    Ok(PerplexityResult::from_folds(per_fold))
}

/// Mean pairwise cosine similarity between the embeddings of the `m` images
/// with the largest proportion of topic `k`.
pub fn coherence(theta: ArrayView2<f64>, embeddings: ArrayView2<f64>, k: usize, m: usize) -> Result<f64> {
    check_len("embedding rows", theta.nrows(), embeddings.nrows())?;
    let top: Vec<usize> = top_images(theta, k, m)?
        .into_iter()
        .filter(|&i| theta[[i, k]] > 0.0)
        .collect();
    if top.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "topic {k} has fewer than 2 images with positive proportion"
        )));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for (a, &i) in top.iter().enumerate() {
        for &j in &top[a + 1..] {
            total += cosine(embeddings.row(i), embeddings.row(j))?;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// 1 − the largest cosine between topic `k` and any other topic.
pub fn exclusivity(b: ArrayView2<f64>, k: usize) -> Result<f64> {
    let kk = b.nrows();
    if kk < 2 {
        return Err(Error::InvalidInput("exclusivity needs at least 2 topics".into()));
    }
    if k >= kk {
        return Err(Error::InvalidParameter(format!("topic {k} out of range for K = {kk}")));
    }
    let mut best = f64::NEG_INFINITY;
    for j in (0..kk).filter(|&j| j != k) {
        best = best.max(cosine(b.row(k), b.row(j))?);
    }
    Ok(1.0 - best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicScores {
    pub coherence: Vec<Option<f64>>,
    pub exclusivity: Vec<Option<f64>>,
    pub mean_coherence: Option<f64>,
    pub mean_exclusivity: Option<f64>,
}

fn mean_defined(v: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = v.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Coherence and exclusivity for every topic; topics where a score is
/// undefined (too few images, zero-norm vectors) get `None`.
pub fn topic_scores(theta: ArrayView2<f64>, raw_embeddings: ArrayView2<f64>, b: ArrayView2<f64>, m: usize) -> TopicScores {
    let k = theta.ncols();
    let coherence: Vec<Option<f64>> = (0..k).map(|t| coherence(theta, raw_embeddings, t, m).ok()).collect();
    let exclusivity: Vec<Option<f64>> = (0..k).map(|t| exclusivity(b, t).ok()).collect();
    TopicScores {
        mean_coherence: mean_defined(&coherence),
        mean_exclusivity: mean_defined(&exclusivity),
        coherence,
        exclusivity,
    }
}

/// One entry of a sweep over topic counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KDiagnostics {
    pub k: usize,
    pub perplexity: PerplexityResult,
    pub topics: TopicScores,
}

/// Contents of diagnostics.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub per_k: Vec<KDiagnostics>,
    /// (K, mean coherence, mean exclusivity) for the trade-off plot.
    pub tradeoff: Vec<(usize, Option<f64>, Option<f64>)>,
}

impl DiagnosticsSummary {
    pub fn new(per_k: Vec<KDiagnostics>) -> Self {
        let tradeoff = per_k
            .iter()
            .map(|d| (d.k, d.topics.mean_coherence, d.topics.mean_exclusivity))
            .collect();
        DiagnosticsSummary { per_k, tradeoff }
    }
}

/// Uncentered embeddings for coherence: adds back the column means.
pub fn uncentered(centered: ArrayView2<f64>, mean: &[f64]) -> Result<ndarray::Array2<f64>> {
    check_len("mean vector", centered.ncols(), mean.len())?;
    Ok(&centered + &ndarray::ArrayView1::from(mean).insert_axis(Axis(0)))
}
