//! Data ingestion, preprocessing, simulation and result persistence.

pub mod align;
pub mod container;
pub mod covariates;
pub mod results;
pub mod synth;

pub use align::{align_topics, cosine, hungarian, realign_gamma, realign_theta, Alignment};
pub use container::{read_embeddings, write_embeddings, EmbeddingContainer};
pub use covariates::{build_design_matrix, read_covariates, Column, CovariateTable, DesignEncoder, FormulaSpec};
pub use results::{format_real, read_matrix_csv, write_matrix_csv, write_results, FittedModel, ResultsBundle};
pub use synth::{synth_generate, SynthScheme, SyntheticTruth};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::GlobalParams;

/// Smallest per-dimension scale handed to the B prior.
pub const SD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Centered {
    pub centered: Array2<f64>,
    pub mean: Array1<f64>,
    /// Per-column sample standard deviation, floored at [`SD_FLOOR`].
    pub sd_scale: Array1<f64>,
}

/// Subtracts column means; the scale of the data is left as is.
pub fn center_embeddings(z: ArrayView2<f64>) -> Result<Centered> {
    let n = z.nrows();
    if n < 2 {
        return Err(Error::InvalidInput(format!("centering needs at least 2 images, got {n}")));
    }
    let mean = z.mean_axis(Axis(0)).expect("nonempty");
    let centered = &z - &mean;
    let mut sd_scale = centered.map_axis(Axis(0), |c| (c.dot(&c) / (n - 1) as f64).sqrt());
    for (j, s) in sd_scale.iter_mut().enumerate() {
        if !(*s >= SD_FLOOR) {
            log::warn!("embedding dimension {j} has (near) zero variance; using sd floor {SD_FLOOR}");
            *s = SD_FLOOR;
        }
    }
    Ok(Centered {
        centered,
        mean,
        sd_scale,
    })
}

/// Hex SHA-256 of the shape and little-endian f64 values of a matrix.
pub fn digest_matrix(m: ArrayView2<f64>) -> String {
    let mut h = Sha256::new();
    h.update((m.nrows() as u64).to_le_bytes());
    h.update((m.ncols() as u64).to_le_bytes());
    for v in m.iter() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Hex SHA-256 over every global parameter value.
pub fn digest_globals(p: &GlobalParams) -> String {
    let mut h = Sha256::new();
    for m in [&p.b, &p.gamma] {
        h.update(digest_matrix(m.view()).as_bytes());
    }
    for v in p.sigma_theta.iter().chain(p.chol_omega.lower()) {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn centering_basics() {
        let z = array![[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]];
        let c = center_embeddings(z.view()).unwrap();
        assert_eq!(c.mean.to_vec(), vec![3.0, 5.0]);
        assert_eq!(c.sd_scale[0], 2.0);
        assert_eq!(c.sd_scale[1], SD_FLOOR);
        let again = center_embeddings(c.centered.view()).unwrap();
        assert_eq!(again.centered, c.centered);
        assert!(center_embeddings(array![[1.0]].view()).is_err());
    }

    #[test]
    fn digests_track_content() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let mut b = a.clone();
        assert_eq!(digest_matrix(a.view()), digest_matrix(b.view()));
        b[[1, 1]] = 4.000000001;
        assert_ne!(digest_matrix(a.view()), digest_matrix(b.view()));
        let flat = array![[1.0, 2.0, 3.0, 4.0]];
        assert_ne!(digest_matrix(a.view()), digest_matrix(flat.view()));
    }
}
