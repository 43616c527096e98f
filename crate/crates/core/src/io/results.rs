//! Writing fit outputs to a directory.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::amortizer::Mlp;
use crate::inference::fit::FitResult;
use crate::inference::state::LocalFamily;
use crate::io::covariates::DesignEncoder;
use crate::model::{GlobalParams, ModelSpec};
use crate::quantities::{omega_matrix, Prediction, PrincipalComponent, TopicGraph};

/// Formats a real with 9 significant digits, shortest form.
pub fn format_real(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_nan() { "NaN".into() } else if x.is_infinite() { format!("{x}") } else { "0".into() };
    }
    let exp = x.abs().log10().floor() as i32;
    if (-5..15).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        // rounding may carry into a new leading digit; still 9 significant
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_owned()
        } else {
            s
        }
    } else {
        let s = format!("{x:.8e}");
        let (mantissa, e) = s.split_once('e').expect("exponent form");
        let mantissa = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{mantissa}e{e}")
    }
}

/// Writes a headed CSV with a leading label column.
pub fn write_matrix_csv(
    path: &Path,
    label_header: &str,
    labels: &[String],
    column_names: &[String],
    m: ArrayView2<f64>,
) -> Result<()> {
    if labels.len() != m.nrows() || column_names.len() != m.ncols() {
        return Err(Error::DimensionMismatch {
            context: "CSV labels",
            expected: m.nrows(),
            found: labels.len(),
        });
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![label_header.to_owned()];
    header.extend(column_names.iter().cloned());
    w.write_record(&header)?;
    for (label, row) in labels.iter().zip(m.outer_iter()) {
        let mut rec = vec![label.clone()];
        rec.extend(row.iter().map(|&v| format_real(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_matrix_csv`]: (column names, labels, values).
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, Vec<String>, Array2<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().skip(1).map(str::to_owned).collect();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        labels.push(rec.get(0).unwrap_or_default().to_owned());
        for field in rec.iter().skip(1) {
            values.push(
                field
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("non-numeric CSV value {field:?}")))?,
            );
        }
    }
    let m = Array2::from_shape_vec((labels.len(), header.len()), values)
        .map_err(|_| Error::Format("ragged CSV rows".into()))?;
    Ok((header, labels, m))
}

/// What a later `refit` or `predict` needs from a fit, at full precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub spec: ModelSpec,
    pub globals: GlobalParams,
    pub amortizer: Option<Mlp>,
    pub design: Option<DesignEncoder>,
    /// Column means removed from the training embeddings.
    pub embedding_mean: Option<Vec<f64>>,
}

impl FittedModel {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Optional extras written next to the core fit outputs.
#[derive(Debug, Clone, Default)]
pub struct ResultsBundle {
    pub image_ids: Option<Vec<String>>,
    pub design: Option<DesignEncoder>,
    pub embedding_mean: Option<Vec<f64>>,
    pub predictions: Option<Vec<Prediction>>,
    pub graph: Option<TopicGraph>,
    pub pca: Option<PrincipalComponent>,
    pub diagnostics: Option<serde_json::Value>,
}

fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["profile", "topic", "mean", "mc_se"])?;
    for p in predictions {
        for (k, (m, se)) in p.mean.iter().zip(&p.mc_se).enumerate() {
            w.write_record([p.profile.clone(), (k + 1).to_string(), format_real(*m), format_real(*se)])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_pca(path: &Path, ids: &[String], pca: &PrincipalComponent) -> Result<()> {
    let scores = Array2::from_shape_vec((pca.scores.len(), 1), pca.scores.clone()).expect("column");
    write_matrix_csv(path, "image_id", ids, &["pc1".to_owned()], scores.view())
}

/// Writes every artifact of a fit into `out_dir` and returns the manifest
/// path. The manifest holds no timing so repeated runs are byte-identical;
/// wall-clock time goes to `run_info.json`.
pub fn write_results(result: &FitResult, bundle: &ResultsBundle, out_dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out_dir)?;
    let spec = &result.manifest.spec;
    let n = result.theta.nrows();
    let ids = bundle
        .image_ids
        .clone()
        .unwrap_or_else(|| (0..n).map(|i| i.to_string()).collect());
    let topics = numbered("topic", spec.k);
    let free = numbered("topic", spec.k_free());

    write_matrix_csv(&out_dir.join("theta.csv"), "image_id", &ids, &topics, result.theta.view())?;
    write_matrix_csv(
        &out_dir.join("lambda_theta.csv"),
        "image_id",
        &ids,
        &free,
        result.lambda_theta.view(),
    )?;
    write_matrix_csv(
        &out_dir.join("beta.csv"),
        "topic",
        &topics,
        &numbered("dim", spec.d),
        result.globals.b.view(),
    )?;
    let covariate_names = bundle
        .design
        .as_ref()
        .map(|d| d.column_names.clone())
        .unwrap_or_else(|| numbered("x", spec.p));
    write_matrix_csv(
        &out_dir.join("gamma.csv"),
        "covariate",
        &covariate_names,
        &free,
        result.globals.gamma.view(),
    )?;
    write_matrix_csv(
        &out_dir.join("omega.csv"),
        "topic",
        &free,
        &free,
        omega_matrix(&result.globals).view(),
    )?;
    let sigma = Array2::from_shape_vec((spec.k_free(), 1), result.globals.sigma_theta.clone()).expect("column");
    write_matrix_csv(
        &out_dir.join("sigma_theta.csv"),
        "topic",
        &free,
        &["sigma".to_owned()],
        sigma.view(),
    )?;
    let every = result.manifest.config.elbo_eval_every;
    let steps: Vec<String> = (1..=result.elbo_trace.len()).map(|i| (i * every).to_string()).collect();
    let trace = Array2::from_shape_vec((result.elbo_trace.len(), 1), result.elbo_trace.clone()).expect("column");
    write_matrix_csv(&out_dir.join("elbo_trace.csv"), "step", &steps, &["elbo".to_owned()], trace.view())?;

    if let Some(p) = &bundle.predictions {
        write_predictions(&out_dir.join("predictions.csv"), p)?;
    }
    if let Some(g) = &bundle.graph {
        write_json(&out_dir.join("graph.json"), g)?;
    }
    if let Some(pca) = &bundle.pca {
        write_pca(&out_dir.join("pca.csv"), &ids, pca)?;
    }
    if let Some(d) = &bundle.diagnostics {
        write_json(&out_dir.join("diagnostics.json"), d)?;
    }

    let model = FittedModel {
        spec: spec.clone(),
        globals: result.globals.clone(),
        amortizer: match &result.state.local {
            LocalFamily::Amortized(m) => Some(m.clone()),
            LocalFamily::Explicit(_) => None,
        },
        design: bundle.design.clone(),
        embedding_mean: bundle.embedding_mean.clone(),
    };
    model.write(&out_dir.join("model.json"))?;
    write_json(
        &out_dir.join("run_info.json"),
        &serde_json::json!({ "wall_clock_seconds": result.manifest.wall_clock_seconds }),
    )?;
    let manifest_path = out_dir.join("manifest.json");
    write_json(&manifest_path, &result.manifest)?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(format_real(0.0), "0");
        assert_eq!(format_real(1.0), "1");
        assert_eq!(format_real(-2.5), "-2.5");
        assert_eq!(format_real(1.0 / 3.0), "0.333333333");
        assert_eq!(format_real(123456789.4), "123456789");
        assert_eq!(format_real(6.02214076e23), "6.02214076e23");
        assert_eq!(format_real(1.234567891234e-7), "1.23456789e-7");
        assert_eq!(format_real(9.9999999999), "10");
        for &x in &[std::f64::consts::PI, -1e-3 / 7.0, 12345.678901234, 9.87654321e-5] {
            let back: f64 = format_real(x).parse().unwrap();
            assert!(((back - x) / x).abs() < 5e-9, "{x} -> {}", format_real(x));
        }
    }
}
