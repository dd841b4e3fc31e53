//! End-to-end training, feature assembly, and the on-disk model bundle.
//!
//! Training runs label embedding, tree construction, matcher fitting, dense
//! feature extraction, concatenation, and ranker fitting in order. A single
//! seed fans out to every stage by hashing the stage name in.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{concat_features, load_dense, BlockKind, Dataset, DenseMatrix, FeatureRecipe, SparseMatrix};
use crate::error::{Error, Result};
use crate::hlt::{build_tree, build_tree_from_points, HltConfig, LabelTree};
use crate::inference::{predict_batch, ranked_rows, BeamConfig};
use crate::label2vec::{train_label2vec, L2VConfig, LabelCorpus};
use crate::matcher::{extract_dense_features, train_matcher, MatchConfig, MatcherModel};
use crate::metrics::{evaluate, propensities, EvalReport, PropensityModel};
use crate::ranker::{train_ranker, RankerConfig, RankerModel};
use crate::seed;

pub const FORMAT_VERSION: &str = "1";

/// Source of the label vectors clustered into the tree.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    /// Skip-gram embeddings of label co-occurrence.
    #[default]
    Label2vec,
    /// Aggregated TF-IDF features of each label's positive samples.
    Tfidf,
    /// Precomputed dense label vectors read from `label_embeddings_path`.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub label_embeddings_path: Option<PathBuf>,
    /// Static dense text embeddings aligned with the train and test rows.
    pub static_train_path: Option<PathBuf>,
    pub static_test_path: Option<PathBuf>,
    pub emb: EmbeddingSource,
    pub use_matcher: bool,
    pub label2vec: L2VConfig,
    pub hlt: HltConfig,
    pub matcher: MatchConfig,
    pub ranker: RankerConfig,
    pub beam: BeamConfig,
    /// One weight per feature block, sparse first; empty means all ones.
    pub block_weights: Vec<f32>,
    pub seed: u64,
    pub eval_ks: Vec<usize>,
    pub propensity_a: f64,
    pub propensity_b: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train_path: None,
            test_path: None,
            label_embeddings_path: None,
            static_train_path: None,
            static_test_path: None,
            emb: EmbeddingSource::default(),
            use_matcher: true,
            label2vec: L2VConfig::default(),
            hlt: HltConfig::default(),
            matcher: MatchConfig::default(),
            ranker: RankerConfig::default(),
            beam: BeamConfig::default(),
            block_weights: Vec::new(),
            seed: 0,
            eval_ks: vec![1, 3, 5],
            propensity_a: 0.55,
            propensity_b: 1.5,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("pipeline config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Copy with every stage seed derived from `seed`.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.label2vec.seed = seed::derive(self.seed, "label2vec");
        out.hlt.seed = seed::derive(self.seed, "hlt");
        out.matcher.seed = seed::derive(self.seed, "matcher");
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.label2vec.validate()?;
        self.hlt.validate()?;
        self.matcher.validate()?;
        self.ranker.validate()?;
        self.beam.validate()?;
        if self.emb == EmbeddingSource::File && self.label_embeddings_path.is_none() {
            return Err(Error::Config("emb=file needs label_embeddings_path".into()));
        }
        if self.eval_ks.contains(&0) {
            return Err(Error::Config("evaluation cutoffs must be at least 1".into()));
        }
        Ok(())
    }

    fn weights_for(&self, n_blocks: usize) -> Vec<f32> {
        if self.block_weights.is_empty() {
            vec![1.0; n_blocks]
        } else {
            self.block_weights.clone()
        }
    }
}

/// Positive-instance feature aggregation: row `l` is the normalized sum of the
/// l2-normalized feature rows of the samples carrying label `l`. A label with
/// no positive samples gets a zero row.
pub fn pifa_embeddings(features: &SparseMatrix, labels: &SparseMatrix) -> Result<SparseMatrix> {
    if features.n_rows() != labels.n_rows() {
        return Err(Error::Shape(format!(
            "{} feature rows with {} label rows",
            features.n_rows(),
            labels.n_rows()
        )));
    }
    let x = features.l2_normalize_rows();
    let emb = labels.binarize().transpose().spmm(&x)?.l2_normalize_rows();
    let empty = (0..emb.n_rows()).filter(|&l| emb.row_nnz(l) == 0).count();
    if empty > 0 {
        warn!("{empty} labels have no positive features and get zero embeddings");
    }
    Ok(emb)
}

/// Dimensions and provenance of a bundle. Contains no timings, so two runs
/// with the same inputs and seed write identical manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: String,
    pub n_features: usize,
    pub n_labels: usize,
    pub depth: usize,
    pub level_sizes: Vec<usize>,
    pub matcher_dim: Option<usize>,
    pub static_dim: Option<usize>,
    pub recipe: FeatureRecipe,
    pub config: PipelineConfig,
    /// SHA-256 of every component file, keyed by bundle-relative path.
    #[serde(default)]
    pub files: BTreeMap<String, String>,
}

/// Everything needed to predict: tree, optional matcher, rankers, propensities.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub manifest: BundleManifest,
    pub tree: LabelTree,
    pub matcher: Option<MatcherModel>,
    pub ranker: RankerModel,
    pub propensity: Option<PropensityModel>,
    /// Wall time per stage of the run that produced the bundle; not persisted.
    pub timings: Vec<(&'static str, f64)>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for path in entries {
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("walked below root");
            let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            out.insert(key, sha256_file(&path)?);
        }
    }
    Ok(())
}

impl ModelBundle {
    /// Concatenated features `[sparse | matcher | static]` in the bundle's layout.
    pub fn features(&self, sparse: &SparseMatrix, static_dense: Option<&DenseMatrix>) -> Result<SparseMatrix> {
        if sparse.n_cols() != self.manifest.n_features {
            return Err(Error::Shape(format!(
                "{} input features for a model over {}",
                sparse.n_cols(),
                self.manifest.n_features
            )));
        }
        let matcher_block = self.matcher.as_ref().map(|m| extract_dense_features(m, sparse)).transpose()?;
        let needs_static = self.manifest.recipe.kinds().contains(&BlockKind::Static);
        let static_dense = match (needs_static, static_dense) {
            (true, None) => return Err(Error::Data("model expects static dense embeddings".into())),
            (true, Some(s)) => Some(s),
            (false, _) => None,
        };
        let (x, recipe) = assemble(sparse, matcher_block.as_ref(), static_dense, &self.manifest.recipe.blocks.iter().map(|b| b.weight).collect::<Vec<_>>())?;
        if recipe != self.manifest.recipe {
            return Err(Error::Shape("feature layout differs from the trained layout".into()));
        }
        Ok(x)
    }

    /// `N x L` top-k scores.
    pub fn predict(&self, sparse: &SparseMatrix, static_dense: Option<&DenseMatrix>, beam: &BeamConfig) -> Result<SparseMatrix> {
        let x = self.features(sparse, static_dense)?;
        predict_batch(&x, &self.tree, &self.ranker, beam)
    }

    /// Predicts `test` and reports metrics at the configured cutoffs.
    pub fn evaluate(&self, test: &Dataset, beam: &BeamConfig, ks: &[usize]) -> Result<EvalReport> {
        let scores = self.predict(&test.features_sparse, test.features_dense.as_ref(), beam)?;
        let ranked: Vec<Vec<u32>> = ranked_rows(&scores).into_iter().map(|r| r.into_iter().map(|e| e.0).collect()).collect();
        evaluate(&test.labels, &ranked, ks, self.propensity.as_ref())
    }

    /// Writes components, then a manifest listing their hashes.
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.tree.save(&dir.join("tree"))?;
        if let Some(m) = &self.matcher {
            m.save(&dir.join("matcher"))?;
        }
        self.ranker.save(&dir.join("ranker"))?;
        if let Some(p) = &self.propensity {
            let path = dir.join("propensity.json");
            let json = serde_json::to_string_pretty(p).expect("propensity model serializes");
            fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        }
        let mut files = BTreeMap::new();
        for sub in ["tree", "matcher", "ranker"] {
            let p = dir.join(sub);
            if p.is_dir() {
                collect_files(dir, &p, &mut files)?;
            }
        }
        if self.propensity.is_some() {
            files.insert("propensity.json".into(), sha256_file(&dir.join("propensity.json"))?);
        }
        self.manifest.files = files;
        let path = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Loads a bundle, verifying file hashes and component shapes.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: BundleManifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported bundle format version {}", manifest.format_version)));
        }
        for (rel, hash) in &manifest.files {
            if &sha256_file(&dir.join(rel))? != hash {
                return Err(Error::Data(format!("bundle file {rel} does not match its manifest hash")));
            }
        }
        let tree = LabelTree::load(&dir.join("tree"))?;
        let matcher = match manifest.matcher_dim {
            Some(_) => Some(MatcherModel::load(&dir.join("matcher"))?),
            None => None,
        };
        let ranker = RankerModel::load(&dir.join("ranker"))?;
        let prop_path = dir.join("propensity.json");
        let propensity = if prop_path.exists() {
            let text = fs::read_to_string(&prop_path).map_err(|e| Error::io(&prop_path, e))?;
            Some(serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", prop_path.display())))?)
        } else {
            None
        };
        let bundle = Self { manifest, tree, matcher, ranker, propensity, timings: Vec::new() };
        bundle.check()?;
        Ok(bundle)
    }

    fn check(&self) -> Result<()> {
        let m = &self.manifest;
        let ok = self.tree.level_sizes() == m.level_sizes
            && self.tree.n_labels() == m.n_labels
            && self.ranker.n_features == m.recipe.total_width()
            && self.ranker.depth() == m.depth
            && self.matcher.as_ref().map(|x| x.dim()) == m.matcher_dim
            && self.matcher.as_ref().is_none_or(|x| x.encoder.n_features() == m.n_features);
        if !ok {
            return Err(Error::Data("bundle components disagree with the manifest".into()));
        }
        Ok(())
    }
}

/// Concatenates the sparse block with whichever dense blocks are present.
pub fn assemble(
    sparse: &SparseMatrix,
    matcher_block: Option<&DenseMatrix>,
    static_block: Option<&DenseMatrix>,
    weights: &[f32],
) -> Result<(SparseMatrix, FeatureRecipe)> {
    let mut blocks = Vec::new();
    if let Some(m) = matcher_block {
        blocks.push((BlockKind::Matcher, m));
    }
    if let Some(s) = static_block {
        blocks.push((BlockKind::Static, s));
    }
    concat_features(sparse, &blocks, weights)
}

fn timed<T>(stage: &'static str, timings: &mut Vec<(&'static str, f64)>, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().map_err(|e| e.in_stage(stage))?;
    let secs = start.elapsed().as_secs_f64();
    info!("stage {stage}: {secs:.2}s");
    timings.push((stage, secs));
    Ok(out)
}

/// Label vectors for tree construction, then the tree itself.
pub fn build_label_tree(config: &PipelineConfig, train: &Dataset, timings: &mut Vec<(&'static str, f64)>) -> Result<LabelTree> {
    match config.emb {
        EmbeddingSource::Label2vec => {
            let emb = timed("label2vec", timings, || {
                let corpus = LabelCorpus::from_label_matrix(&train.labels)?;
                Ok(train_label2vec(&corpus, &config.label2vec)?.target)
            })?;
            timed("hlt", timings, || build_tree(&emb, &config.hlt))
        }
        EmbeddingSource::Tfidf => {
            let emb = timed("pifa", timings, || pifa_embeddings(&train.features_sparse, &train.labels))?;
            timed("hlt", timings, || build_tree_from_points(&emb, &config.hlt))
        }
        EmbeddingSource::File => {
            let path = config.label_embeddings_path.as_ref().expect("validated");
            let emb = timed("load_label_embeddings", timings, || {
                let emb = load_dense(path)?;
                if emb.n_rows() != train.n_labels() {
                    return Err(Error::Shape(format!(
                        "{} label embeddings for {} labels",
                        emb.n_rows(),
                        train.n_labels()
                    )));
                }
                Ok(emb)
            })?;
            timed("hlt", timings, || build_tree(&emb, &config.hlt))
        }
    }
}

/// Fits features and rankers on a given tree and optional matcher.
pub fn train_on_tree(
    config: &PipelineConfig,
    train: &Dataset,
    tree: LabelTree,
    matcher: Option<MatcherModel>,
    mut timings: Vec<(&'static str, f64)>,
) -> Result<ModelBundle> {
    if tree.n_labels() != train.n_labels() {
        return Err(Error::Shape(format!("tree over {} labels for {} label columns", tree.n_labels(), train.n_labels())));
    }
    let (x, recipe) = timed("features", &mut timings, || {
        let matcher_block = matcher.as_ref().map(|m| extract_dense_features(m, &train.features_sparse)).transpose()?;
        let n_blocks = 1 + matcher_block.is_some() as usize + train.features_dense.is_some() as usize;
        let weights = config.weights_for(n_blocks);
        assemble(&train.features_sparse, matcher_block.as_ref(), train.features_dense.as_ref(), &weights)
    })?;
    let ranker = timed("ranker", &mut timings, || train_ranker(&x, &train.labels, &tree, &config.ranker))?;
    let counts: Vec<u64> = train.labels.col_nnz().into_iter().map(|c| c as u64).collect();
    let propensity = propensities(&counts, train.len(), config.propensity_a, config.propensity_b).ok();
    let manifest = BundleManifest {
        format_version: FORMAT_VERSION.into(),
        n_features: train.n_features(),
        n_labels: train.n_labels(),
        depth: tree.depth(),
        level_sizes: tree.level_sizes(),
        matcher_dim: matcher.as_ref().map(|m| m.dim()),
        static_dim: train.features_dense.as_ref().map(|d| d.n_cols()),
        recipe,
        config: config.clone(),
        files: BTreeMap::new(),
    };
    Ok(ModelBundle { manifest, tree, matcher, ranker, propensity, timings })
}

/// Trains a bundle on an in-memory dataset with the resolved stage seeds.
pub fn train_pipeline(config: &PipelineConfig, train: &Dataset) -> Result<ModelBundle> {
    config.validate()?;
    let config = config.resolved();
    let mut timings = Vec::new();
    let tree = build_label_tree(&config, train, &mut timings)?;
    let matcher = if config.use_matcher {
        Some(timed("matcher", &mut timings, || train_matcher(&train.features_sparse, &train.labels, &tree, &config.matcher))?)
    } else {
        None
    };
    train_on_tree(&config, train, tree, matcher, timings)
}

fn load_split(path: &Path, static_path: Option<&PathBuf>) -> Result<Dataset> {
    let data = Dataset::load(path)?;
    match static_path {
        Some(p) => data.with_dense(load_dense(p)?),
        None => Ok(data),
    }
}

/// Loads the configured training split (and static embeddings), trains, and
/// saves the bundle to `out` when given.
pub fn run_pipeline(config: &PipelineConfig, out: Option<&Path>) -> Result<ModelBundle> {
    config.validate()?;
    let train_path = config
        .train_path
        .as_ref()
        .ok_or_else(|| Error::Config("pipeline needs train_path".into()))?;
    let train = load_split(train_path, config.static_train_path.as_ref()).map_err(|e| e.in_stage("load"))?;
    let mut bundle = train_pipeline(config, &train)?;
    if let Some(dir) = out {
        bundle.save(dir).map_err(|e| e.in_stage("save"))?;
    }
    Ok(bundle)
}

/// Loads the configured test split for evaluation.
pub fn load_test_split(config: &PipelineConfig) -> Result<Option<Dataset>> {
    match &config.test_path {
        Some(p) => Ok(Some(load_split(p, config.static_test_path.as_ref())?)),
        None => Ok(None),
    }
}

/// One line per row: `label:score` pairs, best first.
pub fn write_predictions<W: Write>(mut w: W, ranked: &[Vec<(u32, f32)>]) -> Result<()> {
    let io_err = |e| Error::io("<predictions>", e);
    for row in ranked {
        let line: Vec<String> = row.iter().map(|(l, s)| format!("{l}:{s}")).collect();
        writeln!(w, "{}", line.join(" ")).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn save_predictions(path: &Path, ranked: &[Vec<(u32, f32)>]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_predictions(BufWriter::new(file), ranked)
}

pub fn read_predictions<R: BufRead>(reader: R) -> Result<Vec<Vec<(u32, f32)>>> {
    let mut rows = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<predictions>", e))?;
        let mut row = Vec::new();
        for tok in line.split_whitespace() {
            let (l, s) = tok
                .split_once(':')
                .ok_or_else(|| Error::parse(n + 1, format!("expected label:score, got `{tok}`")))?;
            let l: u32 = l.parse().map_err(|_| Error::parse(n + 1, format!("bad label `{l}`")))?;
            let s: f32 = s.parse().map_err(|_| Error::parse(n + 1, format!("bad score `{s}`")))?;
            row.push((l, s));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn load_predictions(path: &Path) -> Result<Vec<Vec<(u32, f32)>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_predictions(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::two_group_dataset;

    fn fast_config() -> PipelineConfig {
        let mut c = PipelineConfig::default();
        c.label2vec.dim = 16;
        c.label2vec.epochs = 5;
        c.hlt = HltConfig { branching: 2, max_leaf: 3, ..HltConfig::default() };
        c.matcher.dim = 16;
        c.matcher.steps_per_level = 60;
        c
    }

    #[test]
    fn pifa_single_instance_is_normalized_features() {
        let x = SparseMatrix::from_rows(3, vec![vec![(0, 3.0), (2, 4.0)], vec![(1, 2.0)]]).unwrap();
        let y = SparseMatrix::from_label_sets(3, &[vec![0], vec![1]]).unwrap();
        let p = pifa_embeddings(&x, &y).unwrap();
        assert_eq!(p.row(0).values, &[0.6, 0.8]);
        assert_eq!(p.row(1).values, &[1.0]);
        assert_eq!(p.row_nnz(2), 0);
    }

    #[test]
    fn resolved_seeds_differ_per_stage() {
        let r = PipelineConfig { seed: 5, ..PipelineConfig::default() }.resolved();
        assert_ne!(r.label2vec.seed, r.hlt.seed);
        assert_ne!(r.hlt.seed, r.matcher.seed);
        assert_eq!(r, r.resolved().resolved());
    }

    #[test]
    fn config_json_defaults_and_errors() {
        let c = PipelineConfig::from_json(r#"{"emb": "tfidf", "hlt": {"branching": 4}}"#).unwrap();
        assert_eq!(c.emb, EmbeddingSource::Tfidf);
        assert_eq!(c.hlt.branching, 4);
        assert_eq!(c.hlt.max_leaf, 100);
        assert!(PipelineConfig::from_json(r#"{"emb": "bogus"}"#).is_err());
        let bad = PipelineConfig { eval_ks: vec![0], ..PipelineConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn bundle_round_trip_and_tamper_check() {
        let (train, test) = two_group_dataset(300, 50, 2).unwrap();
        let mut bundle = train_pipeline(&fast_config(), &train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        let loaded = ModelBundle::load(dir.path()).unwrap();
        assert_eq!(loaded.manifest, bundle.manifest);
        let beam = BeamConfig::default();
        let a = bundle.predict(&test.features_sparse, None, &beam).unwrap();
        let b = loaded.predict(&test.features_sparse, None, &beam).unwrap();
        assert_eq!(a, b);

        let victim = dir.path().join("ranker/bias_1.vec");
        let mut text = fs::read_to_string(&victim).unwrap();
        text.push('\n');
        fs::write(&victim, text).unwrap();
        assert!(ModelBundle::load(dir.path()).is_err());
    }

    #[test]
    fn stage_errors_are_tagged() {
        let (train, _) = two_group_dataset(30, 0, 2).unwrap();
        let mut config = fast_config();
        config.emb = EmbeddingSource::File;
        config.label_embeddings_path = Some("/nonexistent/labels.vec".into());
        let err = train_pipeline(&config, &train).unwrap_err();
        assert!(matches!(err, Error::Stage { stage: "load_label_embeddings", .. }));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn prediction_file_round_trip() {
        let ranked = vec![vec![(3, 0.5f32), (1, 0.25)], vec![]];
        let mut buf = Vec::new();
        write_predictions(&mut buf, &ranked).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "3:0.5 1:0.25\n\n");
        assert_eq!(read_predictions(&buf[..]).unwrap(), ranked);
        assert!(read_predictions(&b"3-0.5\n"[..]).is_err());
    }
}
