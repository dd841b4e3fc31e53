use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use xmatch::data::{load_dense, load_xmc_text, save_dense, save_xmc_text, Dataset, DenseMatrix};
use xmatch::hlt::{build_tree, build_tree_from_points, HltConfig, LabelTree};
use xmatch::inference::{ranked_rows, BeamConfig};
use xmatch::label2vec::{train_label2vec, L2VConfig, LabelCorpus};
use xmatch::matcher::{extract_dense_features, train_matcher, MatchConfig, MatcherModel};
use xmatch::metrics::{evaluate, propensities, EvalReport};
use xmatch::pipeline::{
    load_predictions, load_test_split, pifa_embeddings, run_pipeline, save_predictions, train_on_tree,
    EmbeddingSource, ModelBundle, PipelineConfig,
};
use xmatch::ranker::RankerConfig;
use xmatch::synthetic::two_group_dataset;
use xmatch::{Error, Result};

#[derive(Parser)]
#[command(name = "xmatch", version, about = "Extreme multi-label text classification")]
struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true, env = "XMATCH_THREADS")]
    threads: Option<usize>,
    /// Log level filter, e.g. info or debug.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train label embeddings from label co-occurrence.
    Label2vec(Label2vecArgs),
    /// Cluster label embeddings into a balanced label tree.
    BuildTree(BuildTreeArgs),
    /// Fit the text encoder and per-level label embeddings.
    TrainMatcher(TrainMatcherArgs),
    /// Encode texts with a trained matcher.
    Embed(EmbedArgs),
    /// Fit per-level rankers and write a complete model bundle.
    TrainRanker(TrainRankerArgs),
    /// Beam-search predictions for a data file.
    Predict(PredictArgs),
    /// Score a prediction file against ground truth.
    Evaluate(EvaluateArgs),
    /// Run every training stage, then evaluate on the test split if given.
    Pipeline(PipelineArgs),
    /// Write the synthetic two-group train and test files.
    GenerateSynthetic(SyntheticArgs),
}

#[derive(Args)]
struct Label2vecArgs {
    /// Training file; only its label sets are used.
    #[arg(long, visible_alias = "data")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    dim: usize,
    #[arg(long, visible_alias = "n-neg", default_value_t = 20)]
    neg: usize,
    #[arg(long, visible_alias = "ns", default_value_t = 0.5, allow_negative_numbers = true)]
    ns_exponent: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 2.5e-2)]
    lr_max: f64,
    #[arg(long, default_value_t = 1e-4)]
    lr_min: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct BuildTreeArgs {
    /// Dense label embeddings, one row per label.
    #[arg(long, visible_alias = "emb", conflicts_with = "tfidf", required_unless_present = "tfidf")]
    embeddings: Option<PathBuf>,
    /// Build from aggregated TF-IDF features of `--data` instead.
    #[arg(long, requires = "data")]
    tfidf: bool,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    branching: usize,
    #[arg(long, default_value_t = 100)]
    max_leaf: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainMatcherArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    tau: f64,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 600)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    n_hard: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long)]
    lr_encoder: Option<f32>,
    #[arg(long)]
    lr_label: Option<f32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    match_last_level_only: bool,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    matcher: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainRankerArgs {
    /// Training file with sparse features and labels; dense blocks are
    /// appended from `--matcher` and `--static`.
    #[arg(long, visible_alias = "data")]
    features: PathBuf,
    #[arg(long)]
    tree: PathBuf,
    /// Trained matcher whose text features join the sparse features.
    #[arg(long)]
    matcher: Option<PathBuf>,
    /// Static dense text embeddings aligned with `--data`.
    #[arg(long = "static")]
    static_emb: Option<PathBuf>,
    /// Comma-separated weights, sparse block first.
    #[arg(long, value_delimiter = ',')]
    block_weights: Vec<f32>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    prune_eps: f32,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    #[arg(long)]
    no_man: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "static")]
    static_emb: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    beam: usize,
    #[arg(long, default_value_t = 10)]
    topk: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5")]
    k: Vec<usize>,
    /// Also report propensity-scored metrics.
    #[arg(long)]
    psp: bool,
    #[arg(long, default_value_t = 0.55)]
    prop_a: f64,
    #[arg(long, default_value_t = 1.5)]
    prop_b: f64,
    /// Training file for label frequencies; defaults to the truth file.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Write the report as JSON here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// JSON configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, value_parser = parse_emb)]
    emb: Option<EmbeddingSource>,
    #[arg(long)]
    no_matcher: bool,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SyntheticArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_emb(s: &str) -> std::result::Result<EmbeddingSource, String> {
    match s {
        "label2vec" => Ok(EmbeddingSource::Label2vec),
        "tfidf" => Ok(EmbeddingSource::Tfidf),
        "file" => Ok(EmbeddingSource::File),
        other => Err(format!("unknown embedding source `{other}` (label2vec, tfidf, file)")),
    }
}

fn write_json(path: &Path, value: &EvalReport) -> Result<()> {
    let json = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn load_with_static(data: &Path, static_emb: Option<&PathBuf>) -> Result<Dataset> {
    let dataset = Dataset::load(data)?;
    match static_emb {
        Some(p) => dataset.with_dense(load_dense(p)?),
        None => Ok(dataset),
    }
}

fn label2vec(a: Label2vecArgs) -> Result<()> {
    let (_, labels) = load_xmc_text(&a.input)?;
    let corpus = LabelCorpus::from_label_matrix(&labels)?;
    let config = L2VConfig {
        dim: a.dim,
        n_neg: a.neg,
        ns_exponent: a.ns_exponent,
        epochs: a.epochs,
        lr_max: a.lr_max,
        lr_min: a.lr_min,
        seed: a.seed,
        workers: a.workers,
    };
    let emb = train_label2vec(&corpus, &config)?;
    save_dense(&a.out, &emb.target)?;
    info!("wrote {} label embeddings of width {}", emb.n_labels(), emb.dim());
    Ok(())
}

fn build_tree_cmd(a: BuildTreeArgs) -> Result<()> {
    let config = HltConfig { branching: a.branching, max_leaf: a.max_leaf, seed: a.seed, ..HltConfig::default() };
    let tree = match (&a.embeddings, &a.data) {
        (Some(emb), _) => build_tree(&load_dense(emb)?, &config)?,
        (None, Some(data)) => {
            let (x, y) = load_xmc_text(data)?;
            build_tree_from_points(&pifa_embeddings(&x, &y)?, &config)?
        }
        (None, None) => return Err(Error::Config("build-tree needs --emb or --tfidf --data".into())),
    };
    tree.save(&a.out)?;
    info!("tree levels {:?}", tree.level_sizes());
    Ok(())
}

fn train_matcher_cmd(a: TrainMatcherArgs) -> Result<()> {
    let data = Dataset::load(&a.data)?;
    let tree = LabelTree::load(&a.tree)?;
    let defaults = MatchConfig::default();
    let config = MatchConfig {
        dim: a.dim,
        tau: a.tau,
        lambda: a.lambda,
        batch_size: a.batch,
        n_hard_neg: a.n_hard,
        lr_encoder: a.lr_encoder.unwrap_or(defaults.lr_encoder),
        lr_label: a.lr_label.unwrap_or(defaults.lr_label),
        steps_per_level: a.steps,
        seed: a.seed,
        match_last_level_only: a.match_last_level_only,
        ..defaults
    };
    let model = train_matcher(&data.features_sparse, &data.labels, &tree, &config)?;
    model.save(&a.out)?;
    for (t, h) in model.loss_history.iter().enumerate() {
        if let (Some(first), Some(last)) = (h.first(), h.last()) {
            info!("level {}: loss {first:.4} -> {last:.4}", t + 1);
        }
    }
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<()> {
    let model = MatcherModel::load(&a.matcher)?;
    let (x, _) = load_xmc_text(&a.data)?;
    save_dense(&a.out, &extract_dense_features(&model, &x)?)
}

fn train_ranker_cmd(a: TrainRankerArgs) -> Result<()> {
    let train = load_with_static(&a.features, a.static_emb.as_ref())?;
    let tree = LabelTree::load(&a.tree)?;
    let matcher = a.matcher.as_deref().map(MatcherModel::load).transpose()?;
    let config = PipelineConfig {
        train_path: Some(a.features.clone()),
        static_train_path: a.static_emb.clone(),
        use_matcher: matcher.is_some(),
        ranker: RankerConfig {
            alpha: a.alpha,
            epochs: a.epochs,
            prune_eps: a.prune_eps,
            beam_size: a.beam,
            use_man: !a.no_man,
            ..RankerConfig::default()
        },
        block_weights: a.block_weights,
        ..PipelineConfig::default()
    };
    config.validate()?;
    let mut bundle = train_on_tree(&config, &train, tree, matcher, Vec::new())?;
    bundle.save(&a.out)
}

fn predict(a: PredictArgs) -> Result<()> {
    let bundle = ModelBundle::load(&a.model)?;
    let (x, _) = load_xmc_text(&a.data)?;
    let static_dense: Option<DenseMatrix> = a.static_emb.as_deref().map(load_dense).transpose()?;
    let beam = BeamConfig { beam_size: a.beam, top_k: a.topk };
    let scores = bundle.predict(&x, static_dense.as_ref(), &beam)?;
    save_predictions(&a.out, &ranked_rows(&scores))
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let preds = load_predictions(&a.pred)?;
    let (_, truth) = load_xmc_text(&a.truth)?;
    let prop = if a.psp {
        let counts_from = match &a.train {
            Some(p) => p.clone(),
            None => {
                warn!("no --train given; label frequencies come from the truth file");
                a.truth.clone()
            }
        };
        let (_, y) = load_xmc_text(&counts_from)?;
        let counts: Vec<u64> = y.col_nnz().into_iter().map(|c| c as u64).collect();
        Some(propensities(&counts, y.n_rows(), a.prop_a, a.prop_b)?)
    } else {
        None
    };
    let ranked: Vec<Vec<u32>> = preds.into_iter().map(|r| r.into_iter().map(|e| e.0).collect()).collect();
    let report = evaluate(&truth, &ranked, &a.k, prop.as_ref())?;
    print!("{}", report.to_text());
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(())
}

fn pipeline_cmd(a: PipelineArgs) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if a.train.is_some() {
        config.train_path = a.train;
    }
    if a.test.is_some() {
        config.test_path = a.test;
    }
    if let Some(e) = a.emb {
        config.emb = e;
    }
    if a.no_matcher {
        config.use_matcher = false;
    }
    if let Some(l) = a.lambda {
        config.matcher.lambda = l;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(b) = a.beam {
        config.beam.beam_size = b;
    }
    let bundle = run_pipeline(&config, Some(&a.out))?;
    if let Some(test) = load_test_split(&config).map_err(|e| e.in_stage("load"))? {
        let report = bundle.evaluate(&test, &config.beam, &config.eval_ks).map_err(|e| e.in_stage("evaluate"))?;
        print!("{}", report.to_text());
        write_json(&a.out.join("report.json"), &report)?;
    }
    Ok(())
}

fn generate_synthetic(a: SyntheticArgs) -> Result<()> {
    let (train, test) = two_group_dataset(a.n_train, a.n_test, a.seed)?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    save_xmc_text(a.out_dir.join("train.txt"), &train.features_sparse, &train.labels)?;
    save_xmc_text(a.out_dir.join("test.txt"), &test.features_sparse, &test.labels)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Label2vec(a) => label2vec(a),
        Command::BuildTree(a) => build_tree_cmd(a),
        Command::TrainMatcher(a) => train_matcher_cmd(a),
        Command::Embed(a) => embed(a),
        Command::TrainRanker(a) => train_ranker_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Pipeline(a) => pipeline_cmd(a),
        Command::GenerateSynthetic(a) => generate_synthetic(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
