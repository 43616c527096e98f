//! Matching estimated topics to reference topics.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// `permutation[t]` is the estimated topic matched to reference topic t.
    pub permutation: Vec<usize>,
    /// Cosine between reference topic t and its match.
    pub cosines: Vec<f64>,
}

impl Alignment {
    pub fn mean_cosine(&self) -> f64 {
        self.cosines.iter().sum::<f64>() / self.cosines.len().max(1) as f64
    }
}

pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("cosine of a zero-norm vector".into()));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Permutation of the estimated topics maximizing total cosine similarity.
pub fn align_topics(estimated: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<Alignment> {
    check_len("topic count", truth.nrows(), estimated.nrows())?;
    check_len("embedding dimension", truth.ncols(), estimated.ncols())?;
    let k = truth.nrows();
    let mut sim = Array2::zeros((k, k));
    for t in 0..k {
        for e in 0..k {
            sim[[t, e]] = cosine(truth.row(t), estimated.row(e))?;
        }
    }
    let cost = sim.mapv(|s| -s);
    let permutation = hungarian(cost.view());
    let cosines = (0..k).map(|t| sim[[t, permutation[t]]]).collect();
    Ok(Alignment { permutation, cosines })
}

/// Minimum-cost assignment on a square matrix; result[row] = column.
pub fn hungarian(cost: ArrayView2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "square cost matrix");
    if n == 0 {
        return Vec::new();
    }
    // potentials method with 1-based sentinels
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[p[j] - 1] = j - 1;
    }
    out
}

/// Columns of an N×K proportion matrix in reference-topic order.
pub fn realign_theta(theta: ArrayView2<f64>, alignment: &Alignment) -> Array2<f64> {
    let k = alignment.permutation.len();
    Array2::from_shape_fn((theta.nrows(), k), |(i, t)| theta[[i, alignment.permutation[t]]])
}

/// Prevalence coefficients re-expressed against the reference labelling.
///
/// Appending the zero reference column gives full log-odds coefficients;
/// after permuting, the column of the new reference topic is subtracted so
/// that it is zero again.
pub fn realign_gamma(gamma: ArrayView2<f64>, alignment: &Alignment) -> Result<Array2<f64>> {
    let k = alignment.permutation.len();
    check_len("Gamma columns", k.saturating_sub(1), gamma.ncols())?;
    let full = |r: usize, c: usize| if c + 1 == k { 0.0 } else { gamma[[r, c]] };
    let reference = alignment.permutation[k - 1];
    Ok(Array2::from_shape_fn((gamma.nrows(), k - 1), |(r, t)| {
        full(r, alignment.permutation[t]) - full(r, reference)
    }))
}
