use std::path::Path;
use std::process::{Command, Output};

fn vstm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vstm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vstm(args);
    assert!(
        out.status.success(),
        "vstm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path) {
    ok(&["synth", "--k", "3", "--d", "6", "--p", "2", "--n", "120", "--seed", "4", "--out", s(dir)]);
}

fn fit_args<'a>(dir: &'a Path, out: &'a str, emb: &'a str, cov: &'a str) -> Vec<&'a str> {
    let _ = dir;
    vec![
        "fit", "--embeddings", emb, "--covariates", cov, "--formula", "x1", "--k", "3", "--iterations", "300",
        "--batch-size", "40", "--seed", "2", "--out", out,
    ]
}

#[test]
fn end_to_end_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let emb = data.join("embeddings.vstm");
    let cov = data.join("covariates.csv");
    let fit_dir = tmp.path().join("fitA");
    ok(&fit_args(tmp.path(), s(&fit_dir), s(&emb), s(&cov)));
    for f in [
        "theta.csv", "lambda_theta.csv", "beta.csv", "gamma.csv", "omega.csv", "elbo_trace.csv", "manifest.json",
        "model.json", "graph.json", "pca.csv",
    ] {
        assert!(fit_dir.join(f).exists(), "missing {f}");
    }
    let gamma = std::fs::read_to_string(fit_dir.join("gamma.csv")).unwrap();
    assert!(gamma.starts_with("covariate,topic_1,topic_2\n(Intercept),"));

    let info: serde_json::Value = serde_json::from_str(&ok(&["inspect", s(&emb)])).unwrap();
    assert_eq!(info["n"], 120);
    assert_eq!(info["d"], 6);
    let manifest: serde_json::Value = serde_json::from_str(&ok(&["inspect", s(&fit_dir.join("manifest.json"))])).unwrap();
    assert_eq!(manifest["n_images"], 120);
    assert_eq!(manifest["effective_batch_size"], 40);

    ok(&["topics", "--fit-dir", s(&fit_dir), "--top", "5"]);
    let top = std::fs::read_to_string(fit_dir.join("top_images.csv")).unwrap();
    assert_eq!(top.lines().count(), 1 + 3 * 5);

    let profiles = tmp.path().join("profiles.csv");
    std::fs::write(&profiles, "profile,x1\nlow,-1\nhigh,1\n").unwrap();
    let pred = tmp.path().join("pred.csv");
    ok(&["predict", "--model", s(&fit_dir.join("model.json")), "--profiles", s(&profiles), "--draws", "200", "--out", s(&pred)]);
    let body = std::fs::read_to_string(&pred).unwrap();
    assert_eq!(body.lines().count(), 1 + 2 * 3);

    let refit_dir = tmp.path().join("refit");
    ok(&[
        "refit", "--model", s(&fit_dir.join("model.json")), "--embeddings", s(&emb), "--covariates", s(&cov),
        "--iterations", "100", "--batch-size", "120", "--out", s(&refit_dir),
    ]);
    let theta = std::fs::read_to_string(refit_dir.join("theta.csv")).unwrap();
    assert_eq!(theta.lines().count(), 121);

    let fit_b = tmp.path().join("fitB");
    let mut args = fit_args(tmp.path(), s(&fit_b), s(&emb), s(&cov));
    *args.iter_mut().find(|a| **a == "2").unwrap() = "3";
    ok(&args);
    let tasks = tmp.path().join("tasks.jsonl");
    ok(&[
        "intrusion", "generate", "--fit-dir", s(&fit_dir), "--fit-dir", s(&fit_b), "--tasks-per-model", "12",
        "--seed", "1", "--out", s(&tasks),
    ]);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&tasks)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 24);
    let mut csv = String::from("task_id,evaluator,model,order_index,chosen_position\n");
    for (i, t) in lines.iter().enumerate() {
        let order: Vec<u64> = t["order"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
        let intruder = order.iter().position(|&o| o == 3).unwrap() + 1;
        let chosen = if i % 4 == 0 { intruder % 4 + 1 } else { intruder };
        csv += &format!("{},e{},{},{},{}\n", t["task_id"].as_str().unwrap(), i % 2, t["model"].as_str().unwrap(), i % 3 + 1, chosen);
    }
    let responses = tmp.path().join("responses.csv");
    std::fs::write(&responses, csv).unwrap();
    let scored = tmp.path().join("scores.json");
    ok(&["intrusion", "fit", "--tasks", s(&tasks), "--responses", s(&responses), "--iterations", "500", "--out", s(&scored)]);
    let scores: serde_json::Value = serde_json::from_slice(&std::fs::read(&scored).unwrap()).unwrap();
    let preds = scores["predictions"].as_array().unwrap();
    assert_eq!(preds.len(), 2);
    for p in preds {
        let m = p["mean"].as_f64().unwrap();
        assert!(m > 0.0 && m < 1.0);
    }
}

#[test]
fn diagnose_writes_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let out = tmp.path().join("diag");
    ok(&[
        "diagnose", "--embeddings", s(&data.join("embeddings.vstm")), "--k", "1,3", "--folds", "3",
        "--iterations", "150", "--batch-size", "80", "--out", s(&out),
    ]);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("diagnostics.json")).unwrap()).unwrap();
    let per_k = summary["per_k"].as_array().unwrap();
    assert_eq!(per_k.len(), 2);
    assert_eq!(per_k[1]["perplexity"]["per_fold"].as_array().unwrap().len(), 3);
    assert_eq!(summary["tradeoff"].as_array().unwrap().len(), 2);
}

#[test]
fn repeated_fits_give_identical_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let emb = data.join("embeddings.vstm");
    let cov = data.join("covariates.csv");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&fit_args(tmp.path(), s(&a), s(&emb), s(&cov)));
    ok(&fit_args(tmp.path(), s(&b), s(&emb), s(&cov)));
    for f in ["manifest.json", "theta.csv", "elbo_trace.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn checkpointed_fit_matches_straight_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data);
    let emb = data.join("embeddings.vstm");
    let cov = data.join("covariates.csv");
    let straight = tmp.path().join("straight");
    ok(&fit_args(tmp.path(), s(&straight), s(&emb), s(&cov)));

    // stop at 120 steps, then resume to 300
    let ckpt = tmp.path().join("run.ckpt");
    let first = tmp.path().join("first");
    let mut args = fit_args(tmp.path(), s(&first), s(&emb), s(&cov));
    *args.iter_mut().find(|a| **a == "300").unwrap() = "120";
    args.extend(["--checkpoint", s(&ckpt), "--checkpoint-every", "50"]);
    ok(&args);
    let info: serde_json::Value = serde_json::from_str(&ok(&["inspect", s(&ckpt)])).unwrap();
    assert_eq!(info["step"], 120);

    let resumed = tmp.path().join("resumed");
    let mut args = fit_args(tmp.path(), s(&resumed), s(&emb), s(&cov));
    args.extend(["--resume", s(&ckpt)]);
    ok(&args);
    let theta_a = std::fs::read(straight.join("theta.csv")).unwrap();
    let theta_b = std::fs::read(resumed.join("theta.csv")).unwrap();
    assert_eq!(theta_a, theta_b);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    // unknown flag and missing files are validation errors
    assert_eq!(vstm(&["fit", "--bogus"]).status.code(), Some(2));
    let missing = tmp.path().join("nope.vstm");
    let out = vstm(&["fit", "--embeddings", s(&missing), "--k", "2", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));

    let data = tmp.path().join("data");
    synth(&data);
    let emb = data.join("embeddings.vstm");
    let out = vstm(&["fit", "--embeddings", s(&emb), "--k", "0", "--out", s(&tmp.path().join("k0"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = vstm(&[
        "fit", "--embeddings", s(&emb), "--k", "3", "--iterations", "200", "--learning-rate", "1e12",
        "--out", s(&tmp.path().join("diverge")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
