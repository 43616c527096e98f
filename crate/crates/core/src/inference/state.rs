use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::amortizer::Mlp;
use crate::kernel::{cpc_len, RngStream};
use crate::model::{Dataset, ModelSpec};

/// ln 0.1
pub const INIT_LOG_SCALE: f64 = -std::f64::consts::LN_10;
pub const INIT_LOC_SD: f64 = 0.1;
/// Lloyd iterations refining the k-means++ topic seeds.
pub const LLOYD_ITERATIONS: usize = 10;
/// Smallest initial topic proportion of an image.
pub const INIT_PROPORTION_FLOOR: f64 = 0.02;

/// Mean-field Gaussian factor: location λ and log-scale ρ, ν = exp(ρ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBlock {
    pub loc: Array2<f64>,
    pub log_scale: Array2<f64>,
}

impl GaussianBlock {
    pub fn new(loc: Array2<f64>, log_scale: Array2<f64>) -> Result<Self> {
        if loc.dim() != log_scale.dim() {
            return Err(Error::InvalidParameter(
                "location and log-scale shapes differ".into(),
            ));
        }
        Ok(GaussianBlock { loc, log_scale })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        GaussianBlock {
            loc: Array2::zeros((rows, cols)),
            log_scale: Array2::zeros((rows, cols)),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.loc.dim()
    }

    pub fn len(&self) -> usize {
        self.loc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.loc.is_empty()
    }

    pub fn scale(&self) -> Array2<f64> {
        self.log_scale.mapv(f64::exp)
    }

    /// λ + ν ⊙ ε.
    pub fn draw(&self, eps: &Array2<f64>) -> Array2<f64> {
        &self.loc + &(self.log_scale.mapv(f64::exp) * eps)
    }

    pub fn select_rows(&self, rows: &[usize]) -> GaussianBlock {
        GaussianBlock {
            loc: self.loc.select(Axis(0), rows),
            log_scale: self.log_scale.select(Axis(0), rows),
        }
    }

    pub(crate) fn slices(&self) -> [&[f64]; 2] {
        [
            self.loc.as_slice().expect("standard layout"),
            self.log_scale.as_slice().expect("standard layout"),
        ]
    }

    pub(crate) fn slices_mut(&mut self) -> [&mut [f64]; 2] {
        [
            self.loc.as_slice_mut().expect("standard layout"),
            self.log_scale.as_slice_mut().expect("standard layout"),
        ]
    }

    fn all_finite(&self) -> bool {
        self.loc.iter().chain(self.log_scale.iter()).all(|v| v.is_finite())
    }
}

/// Variational factors of the global parameters, all in unconstrained space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalBlocks {
    /// K×D topic embeddings.
    pub b: GaussianBlock,
    /// P×(K−1) prevalence coefficients.
    pub gamma: GaussianBlock,
    /// 1×(K−1) log σ_θ.
    pub log_sigma: GaussianBlock,
    /// 1×cpc_len(K−1) canonical partial correlations of Ω_θ.
    pub cpc: GaussianBlock,
}

pub const GLOBAL_BLOCK_NAMES: [&str; 4] = ["B", "Gamma", "log_sigma_theta", "cpc_omega"];

impl GlobalBlocks {
    pub fn zeros(spec: &ModelSpec) -> Self {
        let km = spec.k_free();
        GlobalBlocks {
            b: GaussianBlock::zeros(spec.k, spec.d),
            gamma: GaussianBlock::zeros(spec.p, km),
            log_sigma: GaussianBlock::zeros(1, km),
            cpc: GaussianBlock::zeros(1, cpc_len(km)),
        }
    }

    pub fn blocks(&self) -> [&GaussianBlock; 4] {
        [&self.b, &self.gamma, &self.log_sigma, &self.cpc]
    }

    pub fn blocks_mut(&mut self) -> [&mut GaussianBlock; 4] {
        [
            &mut self.b,
            &mut self.gamma,
            &mut self.log_sigma,
            &mut self.cpc,
        ]
    }

    pub(crate) fn slices(&self) -> Vec<&[f64]> {
        self.blocks().into_iter().flat_map(|b| b.slices()).collect()
    }

    pub(crate) fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.blocks_mut()
            .into_iter()
            .flat_map(|b| b.slices_mut())
            .collect()
    }

    pub(crate) fn check_shapes(&self, spec: &ModelSpec) -> Result<()> {
        let reference = GlobalBlocks::zeros(spec);
        for ((a, b), name) in self
            .blocks()
            .iter()
            .zip(reference.blocks())
            .zip(GLOBAL_BLOCK_NAMES)
        {
            if a.shape() != b.shape() || a.log_scale.dim() != b.shape() {
                return Err(Error::InvalidParameter(format!(
                    "variational block {name} has shape {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Source of the per-image variational parameters of ζ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LocalFamily {
    /// One (λ, ρ) row per image.
    Explicit(GaussianBlock),
    /// Shared network mapping (z_i, x_i) to (λ_i, ρ_i).
    Amortized(Mlp),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    pub globals: GlobalBlocks,
    pub local: LocalFamily,
}

impl VariationalState {
    pub fn validate(&self, spec: &ModelSpec, n: usize) -> Result<()> {
        self.globals.check_shapes(spec)?;
        match &self.local {
            LocalFamily::Explicit(block) => {
                if block.shape() != (n, spec.k_free()) || block.log_scale.dim() != block.shape() {
                    return Err(Error::InvalidParameter(format!(
                        "local block has shape {:?}, expected {:?}",
                        block.shape(),
                        (n, spec.k_free())
                    )));
                }
            }
            LocalFamily::Amortized(mlp) => {
                if mlp.input_dim() != spec.d + spec.p || mlp.output_dim() != 2 * spec.k_free() {
                    return Err(Error::InvalidParameter(
                        "amortizer input/output shape does not match the model".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn is_amortized(&self) -> bool {
        matches!(self.local, LocalFamily::Amortized(_))
    }

    /// Same shapes, every entry zero. Used for optimizer moments.
    pub fn zeros_like(&self) -> VariationalState {
        let mut out = self.clone();
        for s in out.globals.slices_mut() {
            s.fill(0.0);
        }
        match &mut out.local {
            LocalFamily::Explicit(block) => block.slices_mut().into_iter().for_each(|s| s.fill(0.0)),
            LocalFamily::Amortized(mlp) => mlp.slices_mut().into_iter().for_each(|s| s.fill(0.0)),
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.globals.blocks().iter().all(|b| b.all_finite())
            && match &self.local {
                LocalFamily::Explicit(b) => b.all_finite(),
                LocalFamily::Amortized(m) => m.slices().iter().all(|s| s.iter().all(|v| v.is_finite())),
            }
    }

    /// Initial state. Topic locations start at k-means centroids (k-means++
    /// seeds refined by Lloyd iterations); explicit per-image locations
    /// start at the memberships that best reconstruct each image from those
    /// centroids. Other locations are small and random; all scales are 0.1.
    pub fn initialize(
        data: &Dataset,
        spec: &ModelSpec,
        amortizer: Option<(usize, usize)>,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let n = data.len();
        if n < spec.k {
            return Err(Error::InvalidInput(format!(
                "need at least K = {} images to seed topics, got {n}",
                spec.k
            )));
        }
        let km = spec.k_free();
        let mut globals = GlobalBlocks::zeros(spec);
        let seeds = seed_rows(data.embeddings.view(), spec.k, rng);
        for (k, &row) in seeds.iter().enumerate() {
            globals.b.loc.row_mut(k).assign(&data.embeddings.row(row));
        }
        lloyd(data.embeddings.view(), &mut globals.b.loc, LLOYD_ITERATIONS);
        for block in [&mut globals.gamma, &mut globals.log_sigma, &mut globals.cpc] {
            block.loc.iter_mut().for_each(|v| *v = INIT_LOC_SD * rng.standard_normal());
        }
        for block in globals.blocks_mut() {
            block.log_scale.fill(INIT_LOG_SCALE);
        }
        let local = match amortizer {
            None => LocalFamily::Explicit(initial_local_block(data.embeddings.view(), globals.b.loc.view(), rng)),
            Some((width, depth)) => {
                LocalFamily::Amortized(Mlp::initialize(spec.d + spec.p, width, depth, km, rng))
            }
        };
        Ok(VariationalState { globals, local })
    }
}

/// Moves each center to the mean of the rows nearest to it; a center that
/// attracts no rows stays put.
pub(crate) fn lloyd(x: ndarray::ArrayView2<f64>, centers: &mut Array2<f64>, iterations: usize) {
    let k = centers.nrows();
    for _ in 0..iterations {
        let mut sums = Array2::<f64>::zeros(centers.dim());
        let mut counts = vec![0usize; k];
        for row in x.outer_iter() {
            let nearest = (0..k)
                .map(|c| {
                    let d: f64 = row.iter().zip(centers.row(c)).map(|(a, b)| (a - b) * (a - b)).sum();
                    (c, d)
                })
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(c, _)| c)
                .expect("k >= 1");
            let mut s = sums.row_mut(nearest);
            s += &row;
            counts[nearest] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
    }
}

/// ALR coordinates of the memberships θ_i minimizing ‖z_i − θ_iᵀB‖² subject
/// to Σθ_i = 1, floored at [`INIT_PROPORTION_FLOOR`]. Solved in the affine
/// coordinates z_i − b_K = Σ_{k<K} θ_ik (b_k − b_K). `None` when the topic
/// rows are affinely dependent.
pub(crate) fn membership_locations(z: ndarray::ArrayView2<f64>, b: ndarray::ArrayView2<f64>) -> Option<Array2<f64>> {
    let km = b.nrows() - 1;
    let anchor = b.row(km);
    let diffs = &b.slice(ndarray::s![..km, ..]) - &anchor;
    let gram = nalgebra::DMatrix::from_fn(km, km, |i, j| diffs.row(i).dot(&diffs.row(j)));
    let scale = gram.diagonal().iter().fold(0.0f64, |m, v| m.max(*v));
    let chol = gram.cholesky()?;
    if chol.l_dirty().diagonal().iter().any(|d| !(d * d > 1e-10 * scale)) {
        return None;
    }
    let mut out = Array2::zeros((z.nrows(), km));
    for (i, row) in z.outer_iter().enumerate() {
        let shifted = &row - &anchor;
        let rhs = nalgebra::DVector::from_fn(km, |c, _| diffs.row(c).dot(&shifted));
        let free = chol.solve(&rhs);
        let reference = (1.0 - free.sum()).max(INIT_PROPORTION_FLOOR);
        for c in 0..km {
            out[[i, c]] = (free[c].max(INIT_PROPORTION_FLOOR) / reference).ln();
        }
    }
    out.iter().all(|v| v.is_finite()).then_some(out)
}

/// Explicit local factors started at [`membership_locations`], or at small
/// random locations when those are unavailable.
pub(crate) fn initial_local_block(z: ndarray::ArrayView2<f64>, b: ndarray::ArrayView2<f64>, rng: &mut RngStream) -> GaussianBlock {
    let (n, km) = (z.nrows(), b.nrows() - 1);
    let mut block = GaussianBlock::zeros(n, km);
    match membership_locations(z, b) {
        Some(loc) => block.loc = loc,
        None => block.loc.iter_mut().for_each(|v| *v = INIT_LOC_SD * rng.standard_normal()),
    }
    block.log_scale.fill(INIT_LOG_SCALE);
    block
}

/// k-means++ seeding: K distinct row indices, each drawn with probability
/// proportional to its squared distance from the rows already chosen.
pub(crate) fn seed_rows(x: ndarray::ArrayView2<f64>, k: usize, rng: &mut RngStream) -> Vec<usize> {
    let n = x.nrows();
    let mut chosen = vec![rng.below(n)];

    let mut dist: Vec<f64> = vec![f64::INFINITY; n];
    while chosen.len() < k {
        let last = x.row(*chosen.last().unwrap());
        for (i, d) in dist.iter_mut().enumerate() {
            let di: f64 = x
                .row(i)
                .iter()
                .zip(last.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            *d = d.min(di);
        }
        for &c in &chosen {
            dist[c] = 0.0;
        }
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut pick = None;
            for (i, &d) in dist.iter().enumerate() {
                if d > 0.0 {
                    pick = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            pick.expect("positive total implies a candidate")
        } else {
            // all remaining rows coincide with a seed; take any unused index
            (0..n).find(|i| !chosen.contains(i)).expect("n >= k")
        };
        chosen.push(next);
    }
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn memberships_reconstruct_interior_mixtures() {
        let b = array![[4.0, 0.0, 0.0], [0.0, 4.0, 0.0], [0.0, 0.0, 4.0]];
        let theta = array![[0.5, 0.3, 0.2], [0.1, 0.1, 0.8]];
        let z = theta.dot(&b);
        let loc = membership_locations(z.view(), b.view()).unwrap();
        for i in 0..2 {
            for c in 0..2 {
                assert!((loc[[i, c]] - (theta[[i, c]] / theta[[i, 2]]).ln()).abs() < 1e-12);
            }
        }
        // shifting the topics and the data together changes nothing
        let shifted = membership_locations((&z - 3.0).view(), (&b - 3.0).view()).unwrap();
        assert!((&shifted - &loc).iter().all(|v| v.abs() < 1e-10));
        let collinear = array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]];
        assert!(membership_locations(z.slice(ndarray::s![.., ..2]), collinear.view()).is_none());
    }

    #[test]
    fn lloyd_finds_separated_centers() {
        let x = array![[0.0, 0.1], [0.0, -0.1], [10.0, 0.0], [10.2, 0.0]];
        let mut c = array![[0.0, 0.1], [0.0, -0.1]];
        lloyd(x.view(), &mut c, 5);
        let mut rows: Vec<f64> = c.column(0).to_vec();
        rows.sort_by(f64::total_cmp);
        assert!((rows[0] - 0.0).abs() < 1e-12 && (rows[1] - 10.1).abs() < 1e-12);
    }

    #[test]
    fn seeding_returns_distinct_rows() {
        let x = array![[0.0, 0.0], [0.0, 0.0], [5.0, 5.0], [5.0, 5.1], [-4.0, 3.0]];
        for seed in 0..20 {
            let mut rng = RngStream::new(seed, 0);
            let mut rows = seed_rows(x.view(), 4, &mut rng);
            rows.sort();
            rows.dedup();
            assert_eq!(rows.len(), 4);
        }
    }

    #[test]
    fn initialize_shapes_and_scales() {
        let mut rng = RngStream::new(1, 0);
        let mut z = Array2::zeros((10, 3));
        z.iter_mut().for_each(|v| *v = rng.standard_normal());
        let data = Dataset::new(z, Array2::ones((10, 2))).unwrap();
        let spec = ModelSpec::new(4, 3, 2, vec![1.0; 3]).unwrap();
        let state = VariationalState::initialize(&data, &spec, None, &mut rng).unwrap();
        state.validate(&spec, 10).unwrap();
        assert!(state.globals.b.log_scale.iter().all(|&v| v == INIT_LOG_SCALE));
        assert!(state.validate(&spec, 11).is_err());
        let amortized = VariationalState::initialize(&data, &spec, Some((8, 1)), &mut rng).unwrap();
        amortized.validate(&spec, 10).unwrap();
        assert!(amortized.is_amortized());
    }

    #[test]
    fn too_few_images_for_topics() {
        let data = Dataset::new(Array2::zeros((2, 3)), Array2::ones((2, 1))).unwrap();
        let spec = ModelSpec::new(3, 3, 1, vec![1.0; 3]).unwrap();
        let mut rng = RngStream::new(0, 0);
        assert!(VariationalState::initialize(&data, &spec, None, &mut rng).is_err());
    }
}
