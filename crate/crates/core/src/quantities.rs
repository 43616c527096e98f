//! Estimands computed from a completed fit.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::inference::state::VariationalState;
use crate::kernel::{cpc_to_cholesky, softmax_with_reference, CholeskyCorrelation, RngStream};
use crate::model::{GlobalParams, ModelSpec};

pub const POSTERIOR_MEAN_DRAWS: usize = 4096;
pub const PREDICTION_DRAWS: usize = 2000;
pub const DEFAULT_GRAPH_THRESHOLD: f64 = 0.1;
pub const DEFAULT_MIXED_FLOOR: f64 = 0.2;
const MIXED_TOP_TOPICS: usize = 5;

/// Point estimates of the globals.
///
/// B and Γ are Gaussian in their natural space, so their means are the
/// variational locations. σ_θ and Ω_θ are Monte Carlo means over draws
/// pushed through their transforms.
pub fn posterior_means(
    state: &VariationalState,
    spec: &ModelSpec,
    draws: usize,
    rng: &mut RngStream,
) -> Result<GlobalParams> {
    state.globals.check_shapes(spec)?;
    if draws == 0 {
        return Err(Error::InvalidParameter("draws must be positive".into()));
    }
    let g = &state.globals;
    let km = spec.k_free();
    let u_loc: Vec<f64> = g.log_sigma.loc.iter().copied().collect();
    let u_scale: Vec<f64> = g.log_sigma.log_scale.iter().map(|r| r.exp()).collect();
    let y_loc: Vec<f64> = g.cpc.loc.iter().copied().collect();
    let y_scale: Vec<f64> = g.cpc.log_scale.iter().map(|r| r.exp()).collect();

    // running means stay exact when every draw is identical
    let mut sigma = vec![0.0; km];
    let mut corr = vec![0.0; km * km];
    let mut y = vec![0.0; y_loc.len()];
    for s in 0..draws {
        let w = 1.0 / (s + 1) as f64;
        for k in 0..km {
            let v = (u_loc[k] + u_scale[k] * rng.standard_normal()).exp();
            sigma[k] += (v - sigma[k]) * w;
        }
        for (j, yj) in y.iter_mut().enumerate() {
            *yj = y_loc[j] + y_scale[j] * rng.standard_normal();
        }
        let (chol, _) = cpc_to_cholesky(&y, km)?;
        for (c, v) in corr.iter_mut().zip(chol.correlation()) {
            *c += (v - *c) * w;
        }
    }
    for i in 0..km {
        corr[i * km + i] = 1.0;
    }
    let params = GlobalParams {
        b: g.b.loc.clone(),
        gamma: g.gamma.loc.clone(),
        sigma_theta: sigma,
        chol_omega: CholeskyCorrelation::from_correlation(km, &corr)?,
    };
    params.validate(spec)?;
    Ok(params)
}

/// A named covariate setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRequest {
    pub profiles: Vec<Profile>,
    pub mc_draws: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub profile: String,
    pub mean: Vec<f64>,
    /// Monte Carlo standard error of each entry of `mean`.
    pub mc_se: Vec<f64>,
}

/// Expected topic proportions at each profile, marginalizing the
/// image-level noise: E[softmax([xΓ + ε, 0])], ε ~ normal(0, Σ_θ).
pub fn predict_topic_proportions(request: &PredictionRequest, params: &GlobalParams) -> Result<Vec<Prediction>> {
    if request.mc_draws == 0 {
        return Err(Error::InvalidParameter("mc_draws must be at least 1".into()));
    }
    let km = params.gamma.ncols();
    let k = km + 1;
    let sigma = &params.sigma_theta;
    let chol = params.chol_omega.lower();
    let mut rng = RngStream::new(request.seed, 0);
    let mut out = Vec::with_capacity(request.profiles.len());
    let mut e = vec![0.0; km];
    let mut zeta = vec![0.0; km];
    let mut theta = vec![0.0; k];
    for profile in &request.profiles {
        check_len("profile covariates", params.gamma.nrows(), profile.x.len())?;
        let mu = Array1::from(profile.x.clone()).dot(&params.gamma);
        let mut sum = vec![0.0; k];
        let mut sum_sq = vec![0.0; k];
        for _ in 0..request.mc_draws {
            rng.fill_standard_normal(&mut e);
            for i in 0..km {
                let row = &chol[i * km..i * km + i + 1];
                let le: f64 = row.iter().zip(&e).map(|(l, v)| l * v).sum();
                zeta[i] = mu[i] + sigma[i] * le;
            }
            softmax_with_reference(&zeta, &mut theta);
            for j in 0..k {
                sum[j] += theta[j];
                sum_sq[j] += theta[j] * theta[j];
            }
        }
        let s = request.mc_draws as f64;
        let mean: Vec<f64> = sum.iter().map(|v| v / s).collect();
        let mc_se = sum_sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                if request.mc_draws < 2 {
                    0.0
                } else {
                    let var = ((q - s * m * m) / (s - 1.0)).max(0.0);
                    (var / s).sqrt()
                }
            })
            .collect();
        out.push(Prediction {
            profile: profile.name.clone(),
            mean,
            mc_se,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicNode {
    pub topic: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicEdge {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
}

/// Thresholded correlation graph over the non-reference topics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicGraph {
    pub nodes: Vec<TopicNode>,
    pub edges: Vec<TopicEdge>,
    /// Community label of each node, numbered by first appearance.
    pub communities: Vec<usize>,
}

/// Connects topics i < j whose estimated correlation exceeds `threshold`
/// and partitions them by greedy modularity agglomeration.
pub fn topic_correlation_graph(params: &GlobalParams, threshold: f64) -> Result<TopicGraph> {
    let km = params.chol_omega.dim();
    let corr = params.chol_omega.correlation();
    let nodes = (0..km)
        .map(|k| TopicNode {
            topic: k,
            label: format!("topic_{}", k + 1),
        })
        .collect();
    let mut edges = Vec::new();
    for i in 0..km {
        for j in (i + 1)..km {
            let w = corr[i * km + j];
            if w > threshold {
                edges.push(TopicEdge {
                    source: i,
                    target: j,
                    weight: w,
                });
            }
        }
    }
    let communities = greedy_modularity(km, &edges);
    Ok(TopicGraph {
        nodes,
        edges,
        communities,
    })
}

/// Merges the pair of communities with the largest modularity gain until no
/// merge improves modularity. Ties go to the lexicographically first pair.
pub fn greedy_modularity(n: usize, edges: &[TopicEdge]) -> Vec<usize> {
    let total: f64 = edges.iter().map(|e| e.weight).sum();
    let mut label: Vec<usize> = (0..n).collect();
    if total <= 0.0 {
        return label;
    }
    let two_m = 2.0 * total;
    // e[a][b]: fraction of edge ends joining communities a and b
    let mut e = vec![vec![0.0; n]; n];
    let mut a = vec![0.0; n];
    for edge in edges {
        let w = edge.weight / two_m;
        e[edge.source][edge.target] += w;
        e[edge.target][edge.source] += w;
        a[edge.source] += w;
        a[edge.target] += w;
    }
    let mut alive = vec![true; n];
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            for j in (i + 1)..n {
                if !alive[i] || !alive[j] || e[i][j] <= 0.0 {
                    continue;
                }
                let gain = 2.0 * (e[i][j] - a[i] * a[j]);
                if gain > 1e-15 && best.is_none_or(|(g, _, _)| gain > g) {
                    best = Some((gain, i, j));
                }
            }
        }
        let Some((_, i, j)) = best else { break };
        // fold j into i
        for c in 0..n {
            let v = e[j][c];
            e[i][c] += v;
            e[c][i] = e[i][c];
            e[j][c] = 0.0;
            e[c][j] = 0.0;
        }
        e[i][i] = 0.0;
        a[i] += a[j];
        a[j] = 0.0;
        alive[j] = false;
        label.iter_mut().filter(|l| **l == j).for_each(|l| *l = i);
    }
    let mut renumber = std::collections::BTreeMap::new();
    label
        .iter()
        .map(|&l| {
            let next = renumber.len();
            *renumber.entry(l).or_insert(next)
        })
        .collect()
}

/// Modularity of a partition under the weighted graph.
pub fn modularity(n: usize, edges: &[TopicEdge], communities: &[usize]) -> f64 {
    let total: f64 = edges.iter().map(|e| e.weight).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let mut degree = vec![0.0; n];
    for e in edges {
        degree[e.source] += e.weight;
        degree[e.target] += e.weight;
    }
    let mut q = 0.0;
    for e in edges {
        if communities[e.source] == communities[e.target] {
            q += 2.0 * e.weight;
        }
    }
    for i in 0..n {
        for j in 0..n {
            if communities[i] == communities[j] {
                q -= degree[i] * degree[j] / (2.0 * total);
            }
        }
    }
    q / (2.0 * total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrincipalComponent {
    pub scores: Vec<f64>,
    /// Unit-norm; the largest-magnitude entry is positive.
    pub loadings: Vec<f64>,
    pub variance_share: f64,
}

/// First principal component of the column-centered rows.
pub fn principal_component_scores(lambda_theta: ArrayView2<f64>) -> Result<PrincipalComponent> {
    let (n, p) = lambda_theta.dim();
    if n == 0 || p == 0 {
        return Err(Error::InvalidInput("PCA needs a nonempty matrix".into()));
    }
    let mean = lambda_theta.mean_axis(Axis(0)).expect("nonempty");
    let centered = &lambda_theta - &mean;
    let magnitude = lambda_theta.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if centered.iter().all(|v| v.abs() <= 1e-12 * (1.0 + magnitude)) {
        return Err(Error::InvalidInput("PCA input has rank 0 (all rows equal)".into()));
    }
    let cov = centered.t().dot(&centered) / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(DMatrix::from_fn(p, p, |i, j| cov[[i, j]]));
    let (top, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut loadings: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
    let norm = loadings.iter().map(|v| v * v).sum::<f64>().sqrt();
    loadings.iter_mut().for_each(|v| *v /= norm);
    let pivot = loadings
        .iter()
        .enumerate()
        .fold(0, |b, (i, v)| if v.abs() > loadings[b].abs() { i } else { b });
    if loadings[pivot] < 0.0 {
        loadings.iter_mut().for_each(|v| *v = -*v);
    }
    let scores = centered.dot(&Array1::from(loadings.clone())).to_vec();
    Ok(PrincipalComponent {
        scores,
        loadings,
        variance_share: (eig.eigenvalues[top].max(0.0) / total).min(1.0),
    })
}

/// The `n` images with the largest proportion of `topic`, ties by index.
pub fn top_images(theta: ArrayView2<f64>, topic: usize, n: usize) -> Result<Vec<usize>> {
    if topic >= theta.ncols() {
        return Err(Error::InvalidParameter(format!(
            "topic {topic} out of range for K = {}",
            theta.ncols()
        )));
    }
    let col = theta.column(topic);
    let mut idx: Vec<usize> = (0..theta.nrows()).collect();
    idx.sort_by(|&a, &b| col[b].total_cmp(&col[a]).then(a.cmp(&b)));
    idx.truncate(n);
    Ok(idx)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedImage {
    pub image: usize,
    /// Up to five (topic, proportion) pairs, largest first.
    pub topics: Vec<(usize, f64)>,
}

/// Images with at least two topics at or above `floor`.
pub fn mixed_images(theta: ArrayView2<f64>, floor: f64) -> Result<Vec<MixedImage>> {
    if !(floor > 0.0 && floor <= 0.5) {
        return Err(Error::InvalidParameter("floor must lie in (0, 0.5]".into()));
    }
    let mut out = Vec::new();
    for (i, row) in theta.outer_iter().enumerate() {
        if row.iter().filter(|&&v| v >= floor).count() < 2 {
            continue;
        }
        let mut topics: Vec<(usize, f64)> = row.iter().copied().enumerate().collect();
        topics.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        topics.truncate(MIXED_TOP_TOPICS);
        out.push(MixedImage { image: i, topics });
    }
    Ok(out)
}

/// Estimated Ω_θ as a dense row-major matrix.
pub fn omega_matrix(params: &GlobalParams) -> Array2<f64> {
    let km = params.chol_omega.dim();
    Array2::from_shape_vec((km, km), params.chol_omega.correlation()).expect("square")
}
