//! Files on disk, design matrices, simulation and topic alignment.

mod common;

use ndarray::{Array2, Axis};
use proptest::prelude::*;
use vstm::io::{
    align_topics, build_design_matrix, center_embeddings, read_covariates, read_embeddings, read_matrix_csv,
    synth_generate, write_embeddings, write_matrix_csv, write_results, EmbeddingContainer, FormulaSpec,
    ResultsBundle, SynthScheme,
};
use vstm::kernel::RngStream;
use vstm::{fit, Dataset, FitConfig, ModelSpec};

fn rank(m: &Array2<f64>) -> usize {
    let dm = nalgebra::DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]]);
    dm.rank(1e-9)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn container_file_round_trip_is_byte_exact(
        (n, d, values) in (0usize..6, 1usize..5).prop_flat_map(|(n, d)| {
            (Just(n), Just(d), prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n * d))
        }),
        with_ids: bool,
    ) {
        let ids = with_ids.then(|| (0..n).map(|i| format!("img-{i}")).collect());
        let c = EmbeddingContainer::new(n, d, values, ids).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.vstm");
        write_embeddings(&path, &c).unwrap();
        let first = std::fs::read(&path).unwrap();
        let back = read_embeddings(&path).unwrap();
        prop_assert_eq!(&back, &c);
        write_embeddings(&path, &back).unwrap();
        prop_assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn csv_round_trip_keeps_nine_digits(values in prop::collection::vec(-1e12f64..1e12, 6), tiny in -1e-12f64..1e-12) {
        let mut m = Array2::from_shape_vec((2, 3), values).unwrap();
        m[[1, 2]] = tiny;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let labels = vec!["a".to_string(), "b".to_string()];
        let cols = vec!["x".to_string(), "y".to_string(), "z".to_string()];
        write_matrix_csv(&path, "id", &labels, &cols, m.view()).unwrap();
        let (c, l, back) = read_matrix_csv(&path).unwrap();
        prop_assert_eq!(c, cols);
        prop_assert_eq!(l, labels);
        for (a, b) in m.iter().zip(back.iter()) {
            prop_assert!((a - b).abs() <= 5e-9 * a.abs());
        }
    }

    #[test]
    fn centering_is_idempotent(seed in 0u64..1000) {
        let mut rng = RngStream::new(seed, 0);
        let z = common::normal_matrix(9, 4, 3.0, &mut rng) + 10.0;
        let once = center_embeddings(z.view()).unwrap();
        let twice = center_embeddings(once.centered.view()).unwrap();
        prop_assert!(twice.mean.iter().all(|v| v.abs() < 1e-12));
        prop_assert!((&twice.centered - &once.centered).iter().all(|v| v.abs() < 1e-12));
        prop_assert!((&twice.sd_scale - &once.sd_scale).iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn truncated_file_reports_length() {
    let c = EmbeddingContainer::new(2, 3, vec![1.0; 6], None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.vstm");
    write_embeddings(&path, &c).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    let err = read_embeddings(&path).unwrap_err().to_string();
    assert!(err.contains("length") || err.contains("bytes"), "{err}");
}

#[test]
fn design_matrices_have_full_rank() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cov.csv");
    let mut body = String::from("image_id,actor,stance,year,score\n");
    let actors = ["ngo", "gov", "firm"];
    let stances = ["pro", "anti"];
    // full factorial, twice over, so no level combination is missing
    for i in 0..48 {
        body += &format!("i{i},{},{},{},{}\n", actors[i % 3], stances[(i / 3) % 2], 2015 + (i / 6) % 4, (i as f64).sin());
    }
    std::fs::write(&path, body).unwrap();
    let table = read_covariates(&path, "image_id", &["year".to_string()]).unwrap();
    for (formula, width) in [
        ("1", 1),
        ("actor", 3),
        ("actor*stance", 6),
        ("actor*stance + year", 9),
        ("actor*stance*year + score", 25),
    ] {
        let (x, enc) = build_design_matrix(&table, &FormulaSpec::parse(formula).unwrap()).unwrap();
        assert_eq!(x.ncols(), width, "{formula}");
        assert_eq!(enc.column_names.len(), width);
        assert_eq!(rank(&x), width, "{formula} is rank deficient");
    }
}

#[test]
fn simulated_embeddings_average_to_the_mixed_topic() {
    let spec = ModelSpec::new(3, 5, 1, vec![1.0; 5]).unwrap();
    let scheme = SynthScheme {
        gamma: Some(Array2::from_shape_vec((1, 2), vec![0.4, -0.3]).unwrap()),
        sigma_theta: Some(vec![1e-9, 1e-9]),
        ..SynthScheme::default()
    };
    let n = 20_000;
    let (z, _, truth) = synth_generate(&spec, n, &scheme, &mut RngStream::new(5, 0)).unwrap();
    let theta = truth.theta.row(0).to_owned();
    assert!((&truth.theta - &theta).iter().all(|v| v.abs() < 1e-6));
    let expected = theta.dot(&truth.params.b);
    let mean = z.mean_axis(Axis(0)).unwrap();
    // unit noise: the standard error of each column mean is 1/√n
    let se = 1.0 / (n as f64).sqrt();
    for (m, e) in mean.iter().zip(expected.iter()) {
        assert!((m - e).abs() < 4.0 * se, "{m} vs {e}");
    }
}

#[test]
fn unrelated_topics_align_with_low_cosine() {
    let mut rng = RngStream::new(8, 0);
    let truth = common::normal_matrix(4, 400, 1.0, &mut rng);
    let noise = common::normal_matrix(4, 400, 1.0, &mut rng);
    let a = align_topics(noise.view(), truth.view()).unwrap();
    // cosines of independent 400-dim vectors have sd 1/20
    assert!(a.mean_cosine().abs() < 0.2, "{}", a.mean_cosine());
}

#[test]
fn written_results_read_back() {
    let rec = common::recovery_dataset(80, 1);
    let config = FitConfig {
        iterations: 50,
        batch_size: 20,
        seed: 3,
        ..FitConfig::default()
    };
    let result = fit(&rec.data, &rec.spec, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest_path = write_results(&result, &ResultsBundle::default(), dir.path()).unwrap();
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(&manifest_path).unwrap()).unwrap();
    assert_eq!(manifest, serde_json::to_value(&result.manifest).unwrap());
    let (cols, labels, theta) = read_matrix_csv(&dir.path().join("theta.csv")).unwrap();
    assert_eq!((labels.len(), cols.len()), (80, 3));
    assert!((&theta - &result.theta).iter().all(|v| v.abs() < 1e-8));

    let mut z = rec.data.embeddings.clone();
    z[[0, 0]] += 1e-9;
    let moved = Dataset::new(z, rec.data.design.clone()).unwrap();
    let other = fit(&moved, &rec.spec, &config).unwrap();
    assert_ne!(other.manifest.digests.embeddings, result.manifest.digests.embeddings);
    assert_eq!(other.manifest.digests.design, result.manifest.digests.design);
    let again = fit(&rec.data, &rec.spec, &config).unwrap();
    assert_eq!(again.manifest.digests, result.manifest.digests);
}
