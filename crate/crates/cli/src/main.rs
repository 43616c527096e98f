//! `vstm`: fit, diagnose and inspect structural topic models over image embeddings.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array2, Axis};
use vstm::diagnostics::{
    heldout_perplexity, intrusion_fit, intrusion_generate, intrusion_predict, read_responses, read_tasks,
    topic_scores, uncentered, write_tasks, CvPlan, DiagnosticsSummary, IntrusionFitConfig, KDiagnostics, ModelTheta,
};
use vstm::inference::checkpoint::{read_checkpoint, write_checkpoint};
use vstm::inference::fit::{resume, FitSession};
use vstm::io::{
    build_design_matrix, center_embeddings, digest_matrix, read_covariates, read_embeddings, read_matrix_csv,
    synth_generate, write_embeddings, write_matrix_csv, write_results, Centered, DesignEncoder, EmbeddingContainer,
    FittedModel, FormulaSpec, ResultsBundle, SynthScheme,
};
use vstm::io::results::write_predictions;
use vstm::kernel::RngStream;
use vstm::quantities::{
    mixed_images, predict_topic_proportions, principal_component_scores, top_images, topic_correlation_graph,
    PredictionRequest, Profile, DEFAULT_GRAPH_THRESHOLD, DEFAULT_MIXED_FLOOR, PREDICTION_DRAWS,
};
use vstm::{fit, refit_local, Dataset, Error, FitConfig, ModelSpec};

const EXIT_VALIDATION: u8 = 2;
const EXIT_DIVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "vstm", version, about = "Structural topic models over image embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write its outputs to a directory.
    Fit(FitCmd),
    /// Infer topic proportions of new images under a fitted model.
    Refit(RefitCmd),
    /// Cross-validated perplexity and coherence/exclusivity over several K.
    Diagnose(DiagnoseCmd),
    /// Expected topic proportions for covariate profiles.
    Predict(PredictCmd),
    /// Top images, mixed images, topic graph and PCA of a fit.
    Topics(TopicsCmd),
    /// Human-validation intruder tasks.
    Intrusion {
        #[command(subcommand)]
        command: IntrusionCmd,
    },
    /// Simulate embeddings and covariates from the generative model.
    Synth(SynthCmd),
    /// Summarize an embedding container, manifest or checkpoint.
    Inspect { path: PathBuf },
}

#[derive(Args, Clone)]
struct DataArgs {
    /// VSTM1 embedding container.
    #[arg(long)]
    embeddings: PathBuf,
    /// Covariate CSV with one row per image.
    #[arg(long)]
    covariates: Option<PathBuf>,
    /// Column of the covariate CSV holding image ids.
    #[arg(long, default_value = "image_id")]
    id_column: String,
    /// Covariate formula such as "year + region" or "a * b".
    #[arg(long, default_value = "1")]
    formula: String,
    /// Covariates always treated as categorical.
    #[arg(long, value_delimiter = ',', default_value = "year")]
    categorical: Vec<String>,
}

#[derive(Args, Clone)]
struct HyperArgs {
    #[arg(long)]
    nu_gamma: Option<f64>,
    #[arg(long)]
    sigma_gamma: Option<f64>,
    #[arg(long)]
    nu_beta: Option<f64>,
    #[arg(long)]
    sigma_beta: Option<f64>,
    #[arg(long)]
    eta_theta: Option<f64>,
}

#[derive(Args, Clone)]
struct OptimArgs {
    #[arg(long, default_value_t = 25_000)]
    iterations: usize,
    #[arg(long, default_value_t = 5_280)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use an inference network for the per-image factors.
    #[arg(long)]
    amortized: bool,
    #[arg(long, default_value_t = 1)]
    mc_samples: usize,
    #[arg(long, default_value_t = 0.005)]
    learning_rate: f64,
    #[arg(long, default_value_t = 256)]
    hidden_width: usize,
    #[arg(long, default_value_t = 1)]
    hidden_depth: usize,
    #[arg(long, default_value_t = 10)]
    elbo_every: usize,
}

impl OptimArgs {
    fn config(&self) -> FitConfig {
        FitConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            mc_samples: self.mc_samples,
            learning_rate: self.learning_rate,
            seed: self.seed,
            amortized: self.amortized,
            hidden_width: self.hidden_width,
            hidden_depth: self.hidden_depth,
            elbo_eval_every: self.elbo_every,
            ..FitConfig::default()
        }
    }
}

#[derive(Args)]
struct FitCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Number of topics.
    #[arg(long)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    /// Write a checkpoint here every `--checkpoint-every` steps and at the end.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    checkpoint_every: usize,
    /// Continue from a checkpoint instead of starting afresh.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct RefitCmd {
    /// model.json written by `vstm fit`.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DiagnoseCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    optim: OptimArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    /// Topic counts to compare.
    #[arg(long, value_delimiter = ',', required = true)]
    k: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Images per topic used for coherence.
    #[arg(long, default_value_t = 20)]
    coherence_top: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictCmd {
    #[arg(long)]
    model: PathBuf,
    /// CSV with a `profile` name column and one column per covariate.
    #[arg(long)]
    profiles: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "year")]
    categorical: Vec<String>,
    #[arg(long, default_value_t = PREDICTION_DRAWS)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TopicsCmd {
    /// Output directory of `vstm fit`.
    #[arg(long)]
    fit_dir: PathBuf,
    #[arg(long, default_value_t = 20)]
    top: usize,
    #[arg(long, default_value_t = DEFAULT_MIXED_FLOOR)]
    floor: f64,
    #[arg(long, default_value_t = DEFAULT_GRAPH_THRESHOLD)]
    threshold: f64,
    /// Defaults to the fit directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum IntrusionCmd {
    /// Draw tasks from one or more fits and write them as JSON lines.
    Generate {
        /// Fit output directories; the directory name is the model id.
        #[arg(long = "fit-dir", required = true)]
        fit_dirs: Vec<PathBuf>,
        #[arg(long, default_value_t = 40)]
        tasks_per_model: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score evaluator responses and predict each model's correct rate.
    Fit {
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        responses: PathBuf,
        #[arg(long, default_value_t = 3000)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output JSON.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct SynthCmd {
    #[arg(long)]
    k: usize,
    #[arg(long)]
    d: usize,
    /// Covariate columns including the intercept.
    #[arg(long, default_value_t = 2)]
    p: usize,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn apply_hyper(spec: &mut ModelSpec, h: &HyperArgs) -> vstm::Result<()> {
    if let Some(v) = h.nu_gamma {
        spec.nu_gamma = v;
    }
    if let Some(v) = h.sigma_gamma {
        spec.sigma_gamma = v;
    }
    if let Some(v) = h.nu_beta {
        spec.nu_beta = v;
    }
    if let Some(v) = h.sigma_beta {
        spec.sigma_beta_base = v;
    }
    if let Some(v) = h.eta_theta {
        spec.eta_theta = v;
    }
    spec.validate()
}

fn image_ids(c: &EmbeddingContainer) -> Vec<String> {
    c.ids.clone().unwrap_or_else(|| (0..c.n).map(|i| i.to_string()).collect())
}

/// Design matrix for the images in `ids`; intercept only without covariates.
fn design_for(args: &DataArgs, ids: &[String], encoder: Option<&DesignEncoder>) -> vstm::Result<(Array2<f64>, Option<DesignEncoder>)> {
    let Some(path) = &args.covariates else {
        if let Some(enc) = encoder {
            if enc.width() != 1 {
                return Err(Error::InvalidInput("the model uses covariates; pass --covariates".into()));
            }
        }
        return Ok((Array2::ones((ids.len(), 1)), None));
    };
    let table = read_covariates(path, &args.id_column, &args.categorical)?.align_to(ids)?;
    match encoder {
        Some(enc) => Ok((enc.encode(&table)?, Some(enc.clone()))),
        None => {
            let (x, enc) = build_design_matrix(&table, &FormulaSpec::parse(&args.formula)?)?;
            Ok((x, Some(enc)))
        }
    }
}

struct Loaded {
    ids: Vec<String>,
    centered: Centered,
    data: Dataset,
    design: Option<DesignEncoder>,
}

fn load(args: &DataArgs) -> vstm::Result<Loaded> {
    let container = read_embeddings(&args.embeddings)?;
    let ids = image_ids(&container);
    let centered = center_embeddings(container.to_array().view())?;
    let (x, design) = design_for(args, &ids, None)?;
    let data = Dataset::new(centered.centered.clone(), x)?;
    Ok(Loaded {
        ids,
        centered,
        data,
        design,
    })
}

fn spec_for(loaded: &Loaded, k: usize, hyper: &HyperArgs) -> vstm::Result<ModelSpec> {
    let mut spec = ModelSpec::new(k, loaded.data.embeddings.ncols(), loaded.data.design.ncols(), loaded.centered.sd_scale.to_vec())?;
    apply_hyper(&mut spec, hyper)?;
    Ok(spec)
}

fn run_fit(cmd: FitCmd) -> vstm::Result<()> {
    let loaded = load(&cmd.data)?;
    let spec = spec_for(&loaded, cmd.k, &cmd.hyper)?;
    let config = cmd.optim.config();
    let mut session = match &cmd.resume {
        Some(path) => {
            let mut s = read_checkpoint(path)?;
            if s.spec != spec {
                return Err(Error::InvalidInput("checkpoint was written for a different model".into()));
            }
            // only the iteration target may change between runs
            let saved = FitConfig {
                iterations: config.iterations,
                ..s.config.clone()
            };
            if saved != config {
                return Err(Error::InvalidInput("checkpoint was written with different fit settings".into()));
            }
            if s.step > config.iterations {
                return Err(Error::InvalidInput(format!(
                    "checkpoint is already at step {}, past --iterations {}",
                    s.step, config.iterations
                )));
            }
            s.config.iterations = config.iterations;
            s
        }
        None => FitSession::new(&loaded.data, &spec, &config)?,
    };
    if let Some(ckpt) = &cmd.checkpoint {
        let every = cmd.checkpoint_every.max(1);
        while session.step < session.config.iterations {
            session.step(&loaded.data)?;
            if session.step % every == 0 {
                write_checkpoint(ckpt, &session)?;
            }
        }
        write_checkpoint(ckpt, &session)?;
    }
    let result = resume(&loaded.data, session)?;
    let graph = (spec.k >= 2).then(|| topic_correlation_graph(&result.globals, DEFAULT_GRAPH_THRESHOLD)).transpose()?;
    let pca = if spec.k >= 2 { principal_component_scores(result.lambda_theta.view()).ok() } else { None };
    let bundle = ResultsBundle {
        image_ids: Some(loaded.ids.clone()),
        design: loaded.design.clone(),
        embedding_mean: Some(loaded.centered.mean.to_vec()),
        graph,
        pca,
        ..ResultsBundle::default()
    };
    let manifest = write_results(&result, &bundle, &cmd.out)?;
    log::info!("wrote {}", manifest.display());
    println!("{}", manifest.display());
    Ok(())
}

fn run_refit(cmd: RefitCmd) -> vstm::Result<()> {
    let model = FittedModel::read(&cmd.model)?;
    let container = read_embeddings(&cmd.data.embeddings)?;
    let ids = image_ids(&container);
    let mut z = container.to_array();
    if let Some(mean) = &model.embedding_mean {
        if mean.len() != z.ncols() {
            return Err(Error::DimensionMismatch {
                context: "embedding dimension",
                expected: mean.len(),
                found: z.ncols(),
            });
        }
        z -= &ndarray::ArrayView1::from(mean.as_slice()).insert_axis(Axis(0));
    }
    let (x, _) = design_for(&cmd.data, &ids, model.design.as_ref())?;
    let data = Dataset::new(z, x)?;
    let local = refit_local(&data, &model.spec, &model.globals, &cmd.optim.config(), model.amortizer.as_ref())?;
    fs::create_dir_all(&cmd.out)?;
    let topics: Vec<String> = (1..=model.spec.k).map(|k| format!("topic_{k}")).collect();
    write_matrix_csv(&cmd.out.join("theta.csv"), "image_id", &ids, &topics, local.theta.view())?;
    write_matrix_csv(
        &cmd.out.join("lambda_theta.csv"),
        "image_id",
        &ids,
        &topics[..model.spec.k_free()],
        local.lambda_theta.view(),
    )?;
    let trace = Array2::from_shape_vec((local.elbo_trace.len(), 1), local.elbo_trace.clone()).expect("column");
    let every = cmd.optim.elbo_every;
    let steps: Vec<String> = (1..=local.elbo_trace.len()).map(|i| (i * every).to_string()).collect();
    write_matrix_csv(&cmd.out.join("elbo_trace.csv"), "step", &steps, &["elbo".to_owned()], trace.view())?;
    println!("{}", cmd.out.join("theta.csv").display());
    Ok(())
}

fn run_diagnose(cmd: DiagnoseCmd) -> vstm::Result<()> {
    let loaded = load(&cmd.data)?;
    let config = cmd.optim.config();
    let plan = CvPlan::new(loaded.data.len(), cmd.folds, cmd.optim.seed)?;
    let raw = uncentered(loaded.centered.centered.view(), loaded.centered.mean.as_slice().expect("contiguous"))?;
    let mut per_k = Vec::new();
    for &k in &cmd.k {
        let spec = spec_for(&loaded, k, &cmd.hyper)?;
        log::info!("K = {k}: cross-validating");
        let perplexity = heldout_perplexity(&loaded.data, &spec, &config, &plan)?;
        let full = fit(&loaded.data, &spec, &config)?;
        let topics = topic_scores(full.theta.view(), raw.view(), full.globals.b.view(), cmd.coherence_top);
        per_k.push(KDiagnostics { k, perplexity, topics });
    }
    let summary = DiagnosticsSummary::new(per_k);
    fs::create_dir_all(&cmd.out)?;
    let path = cmd.out.join("diagnostics.json");
    fs::write(&path, serde_json::to_vec_pretty(&summary)?)?;
    println!("{}", path.display());
    Ok(())
}

fn run_predict(cmd: PredictCmd) -> vstm::Result<()> {
    let model = FittedModel::read(&cmd.model)?;
    let table = read_covariates(&cmd.profiles, "profile", &cmd.categorical)?;
    let x = match &model.design {
        Some(enc) => enc.encode(&table)?,
        None => {
            // raw design columns in file order
            let mut x = Array2::zeros((table.len(), table.columns.len()));
            for (j, (name, col)) in table.columns.iter().enumerate() {
                match col {
                    vstm::io::Column::Numeric(v) => x.column_mut(j).assign(&ndarray::Array1::from(v.clone())),
                    vstm::io::Column::Categorical(_) => {
                        return Err(Error::InvalidInput(format!("profile column {name} must be numeric")))
                    }
                }
            }
            x
        }
    };
    let profiles = table
        .ids
        .iter()
        .zip(x.outer_iter())
        .map(|(name, row)| Profile {
            name: name.clone(),
            x: row.to_vec(),
        })
        .collect();
    let request = PredictionRequest {
        profiles,
        mc_draws: cmd.draws,
        seed: cmd.seed,
    };
    let predictions = predict_topic_proportions(&request, &model.globals)?;
    write_predictions(&cmd.out, &predictions)?;
    println!("{}", cmd.out.display());
    Ok(())
}

fn run_topics(cmd: TopicsCmd) -> vstm::Result<()> {
    let model = FittedModel::read(&cmd.fit_dir.join("model.json"))?;
    let (_, ids, theta) = read_matrix_csv(&cmd.fit_dir.join("theta.csv"))?;
    let (_, _, lambda) = read_matrix_csv(&cmd.fit_dir.join("lambda_theta.csv"))?;
    let out = cmd.out.clone().unwrap_or_else(|| cmd.fit_dir.clone());
    fs::create_dir_all(&out)?;

    let mut w = csv::Writer::from_path(out.join("top_images.csv")).map_err(Error::from)?;
    w.write_record(["topic", "rank", "image_id", "proportion"]).map_err(Error::from)?;
    for k in 0..theta.ncols() {
        for (rank, i) in top_images(theta.view(), k, cmd.top)?.into_iter().enumerate() {
            w.write_record([
                (k + 1).to_string(),
                (rank + 1).to_string(),
                ids[i].clone(),
                vstm::io::format_real(theta[[i, k]]),
            ])
            .map_err(Error::from)?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(out.join("mixed_images.csv")).map_err(Error::from)?;
    w.write_record(["image_id", "topic", "proportion"]).map_err(Error::from)?;
    for m in mixed_images(theta.view(), cmd.floor)? {
        for (k, p) in m.topics.iter().filter(|(_, p)| *p >= cmd.floor) {
            w.write_record([ids[m.image].clone(), (k + 1).to_string(), vstm::io::format_real(*p)])
                .map_err(Error::from)?;
        }
    }
    w.flush()?;

    if model.spec.k >= 2 {
        let graph = topic_correlation_graph(&model.globals, cmd.threshold)?;
        fs::write(out.join("graph.json"), serde_json::to_vec_pretty(&graph)?)?;
        let pca = principal_component_scores(lambda.view())?;
        vstm::io::results::write_pca(&out.join("pca.csv"), &ids, &pca)?;
    }
    println!("{}", out.display());
    Ok(())
}

fn model_theta(dir: &Path) -> vstm::Result<ModelTheta> {
    let (_, image_ids, theta) = read_matrix_csv(&dir.join("theta.csv"))?;
    let model = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(ModelTheta { model, image_ids, theta })
}

fn run_intrusion(cmd: IntrusionCmd) -> vstm::Result<()> {
    match cmd {
        IntrusionCmd::Generate {
            fit_dirs,
            tasks_per_model,
            seed,
            out,
        } => {
            let models = fit_dirs.iter().map(|d| model_theta(d)).collect::<vstm::Result<Vec<_>>>()?;
            let tasks = intrusion_generate(&models, tasks_per_model, &mut RngStream::new(seed, 0))?;
            write_tasks(&out, &tasks)?;
            println!("{}", out.display());
        }
        IntrusionCmd::Fit {
            tasks,
            responses,
            iterations,
            seed,
            out,
        } => {
            let tasks = read_tasks(&tasks)?;
            let responses = read_responses(&responses, &tasks)?;
            let config = IntrusionFitConfig {
                iterations,
                ..IntrusionFitConfig::default()
            };
            let post = intrusion_fit(&responses, &config, &mut RngStream::new(seed, 0))?;
            let predictions = post
                .models
                .iter()
                .map(|m| intrusion_predict(&post, m))
                .collect::<vstm::Result<Vec<_>>>()?;
            let summary = serde_json::json!({
                "models": post.models,
                "evaluators": post.evaluators,
                "separation": post.separation,
                "sigma_kappa_median": post.sigma_kappa_median(),
                "predictions": predictions,
            });
            fs::write(&out, serde_json::to_vec_pretty(&summary)?)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn run_synth(cmd: SynthCmd) -> vstm::Result<()> {
    let spec = ModelSpec::new(cmd.k, cmd.d, cmd.p, vec![1.0; cmd.d])?;
    let (z, x, truth) = synth_generate(&spec, cmd.n, &SynthScheme::default(), &mut RngStream::new(cmd.seed, 0))?;
    fs::create_dir_all(&cmd.out)?;
    let ids: Vec<String> = (0..cmd.n).map(|i| format!("img{i:06}")).collect();
    write_embeddings(&cmd.out.join("embeddings.vstm"), &EmbeddingContainer::from_array(&z, Some(ids.clone()))?)?;
    let names: Vec<String> = (1..cmd.p).map(|j| format!("x{j}")).collect();
    write_matrix_csv(
        &cmd.out.join("covariates.csv"),
        "image_id",
        &ids,
        &names,
        x.slice(ndarray::s![.., 1..]),
    )?;
    fs::write(cmd.out.join("truth.json"), serde_json::to_vec_pretty(&truth)?)?;
    let formula = if names.is_empty() { "1".to_owned() } else { names.join(" + ") };
    println!("{}\nformula: {formula}", cmd.out.display());
    Ok(())
}

fn run_inspect(path: &Path) -> vstm::Result<()> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(vstm::io::container::CONTAINER_MAGIC) {
        let c = EmbeddingContainer::from_bytes(&bytes)?;
        let summary = serde_json::json!({
            "kind": "embeddings",
            "n": c.n,
            "d": c.d,
            "has_ids": c.ids.is_some(),
            "first_id": c.ids.as_ref().and_then(|v| v.first()),
            "digest": digest_matrix(c.to_array().view()),
        });
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else if bytes.starts_with(vstm::inference::checkpoint::CHECKPOINT_MAGIC) {
        let s = read_checkpoint(path)?;
        let summary = serde_json::json!({
            "kind": "checkpoint",
            "step": s.step,
            "iterations": s.config.iterations,
            "k": s.spec.k,
            "d": s.spec.d,
            "p": s.spec.p,
            "last_elbo": s.trace.last(),
        });
        println!("{}", serde_json::to_string_pretty(&summary)?);
    } else {
        let value: serde_json::Value = serde_json::from_slice(&bytes)
            .map_err(|_| Error::Format(format!("{} is not a container, checkpoint or JSON file", path.display())))?;
        println!("{}", serde_json::to_string_pretty(&value)?);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(c) => run_fit(c),
        Command::Refit(c) => run_refit(c),
        Command::Diagnose(c) => run_diagnose(c),
        Command::Predict(c) => run_predict(c),
        Command::Topics(c) => run_topics(c),
        Command::Intrusion { command } => run_intrusion(command),
        Command::Synth(c) => run_synth(c),
        Command::Inspect { path } => run_inspect(&path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Divergence(_) | Error::NonFinite(_) => ExitCode::from(EXIT_DIVERGENCE),
                _ => ExitCode::from(EXIT_VALIDATION),
            }
        }
    }
}
