//! Contrastive text-label matching over the label tree.
//!
//! A bag-of-feature-embeddings encoder and one label-embedding layer per tree
//! level are fitted level by level, coarse to fine. Each level starts from its
//! parent's embeddings and is refined with the mixed text-label / label-text
//! objective using hard negatives mined with the current model.

mod encoder;
mod loss;

use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::index::sample;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use encoder::{encode_rows, encode_text, EncoderGrad, EncoderParams};
pub use loss::{
    label_text_loss, label_text_loss_grad, matching_loss, matching_loss_grad, text_label_loss,
    text_label_loss_grad, LossGrad, MatchBatch,
};

use crate::data::{load_dense, save_dense, DenseMatrix, SparseMatrix};
use crate::error::{Error, Result};
use crate::hlt::{propagate_labels, LabelTree};
use crate::seed;

/// Embeddings `E^(t)` of the `K_t` nodes of one tree level.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelEmbeddingLayer {
    /// 1-based tree level.
    pub level: usize,
    pub embeddings: DenseMatrix,
}

impl LabelEmbeddingLayer {
    pub fn n_nodes(&self) -> usize {
        self.embeddings.n_rows()
    }

    /// Dot-product scores of one encoded text against every node.
    pub fn scores(&self, z: &[f32]) -> Vec<f32> {
        self.embeddings.rows().map(|e| crate::data::dot(e, z)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub dim: usize,
    pub tau: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub n_hard_neg: usize,
    pub lr_encoder: f32,
    pub lr_label: f32,
    pub steps_per_level: usize,
    /// Standard deviation of the bootstrap noise and of level-1 initialization.
    pub init_sigma: f32,
    pub seed: u64,
    /// Train only the deepest level; shallower levels keep their bootstrap values.
    pub match_last_level_only: bool,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            tau: 0.05,
            lambda: 0.5,
            batch_size: 128,
            n_hard_neg: 10,
            lr_encoder: 0.2,
            lr_label: 0.05,
            steps_per_level: 600,
            init_sigma: 0.01,
            seed: 0,
            match_last_level_only: false,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if self.dim == 0 || self.batch_size == 0 {
            return Err(Error::Config("matcher dim and batch size must be positive".into()));
        }
        for (name, lr) in [("lr_encoder", self.lr_encoder), ("lr_label", self.lr_label)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {lr}")));
            }
        }
        if !(self.init_sigma >= 0.0 && self.init_sigma.is_finite()) {
            return Err(Error::Config(format!("init_sigma must be non-negative, got {}", self.init_sigma)));
        }
        Ok(())
    }
}

/// Trained encoder plus one embedding layer per tree level.
#[derive(Clone, Debug)]
pub struct MatcherModel {
    pub encoder: EncoderParams,
    /// `layers[t - 1]` is level `t`.
    pub layers: Vec<LabelEmbeddingLayer>,
    /// Mini-batch losses per level, in step order. Empty for untrained levels.
    pub loss_history: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MatcherManifest {
    format_version: String,
    dim: usize,
    n_features: usize,
    level_sizes: Vec<usize>,
    loss_history: Vec<Vec<f64>>,
}

impl MatcherModel {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn layer(&self, t: usize) -> &LabelEmbeddingLayer {
        &self.layers[t - 1]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_dense(dir.join("encoder.vec"), &self.encoder.feature_embeddings)?;
        let bias = DenseMatrix::new(1, self.dim(), self.encoder.bias.clone())?;
        save_dense(dir.join("encoder_bias.vec"), &bias)?;
        for layer in &self.layers {
            save_dense(dir.join(format!("level_{}.vec", layer.level)), &layer.embeddings)?;
        }
        let manifest = MatcherManifest {
            format_version: "1".into(),
            dim: self.dim(),
            n_features: self.encoder.n_features(),
            level_sizes: self.layers.iter().map(|l| l.n_nodes()).collect(),
            loss_history: self.loss_history.clone(),
        };
        let path = dir.join("matcher.json");
        let json = serde_json::to_string_pretty(&manifest).expect("matcher manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("matcher.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: MatcherManifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if manifest.format_version != "1" {
            return Err(Error::Data(format!(
                "unsupported matcher format version {}",
                manifest.format_version
            )));
        }
        let table = load_dense(dir.join("encoder.vec"))?;
        let bias = load_dense(dir.join("encoder_bias.vec"))?.into_values();
        let encoder = EncoderParams::new(table, bias)?;
        if encoder.dim() != manifest.dim || encoder.n_features() != manifest.n_features {
            return Err(Error::Data("matcher encoder disagrees with manifest".into()));
        }
        let mut layers = Vec::new();
        for (t, &k) in manifest.level_sizes.iter().enumerate() {
            let embeddings = load_dense(dir.join(format!("level_{}.vec", t + 1)))?;
            if embeddings.n_rows() != k || embeddings.n_cols() != manifest.dim {
                return Err(Error::Data(format!("matcher level {} has the wrong shape", t + 1)));
            }
            layers.push(LabelEmbeddingLayer { level: t + 1, embeddings });
        }
        Ok(Self { encoder, layers, loss_history: manifest.loss_history })
    }
}

/// Picks up to `n_hard` non-positive nodes per text.
///
/// With a layer, the highest dot-product scores win and ties go to the smaller
/// id. Without one, negatives are drawn uniformly from a per-text seeded stream.
/// Lists are returned in ascending id order.
pub fn mine_hard_negatives(
    z: &DenseMatrix,
    layer: Option<&LabelEmbeddingLayer>,
    positives: &SparseMatrix,
    n_hard: usize,
    seed: u64,
) -> Result<Vec<Vec<u32>>> {
    if positives.n_rows() != z.n_rows() {
        return Err(Error::Shape(format!(
            "{} encoded texts with {} label rows",
            z.n_rows(),
            positives.n_rows()
        )));
    }
    let k = positives.n_cols();
    if let Some(layer) = layer {
        if layer.n_nodes() != k || layer.embeddings.n_cols() != z.n_cols() {
            return Err(Error::Shape(format!(
                "layer of {}x{} for {k} labels and width {}",
                layer.n_nodes(),
                layer.embeddings.n_cols(),
                z.n_cols()
            )));
        }
    }
    let lists = (0..z.n_rows())
        .into_par_iter()
        .map(|i| {
            let pos = positives.row(i);
            let n_neg = k - pos.nnz();
            let take = n_hard.min(n_neg);
            let mut out: Vec<u32> = match layer {
                Some(layer) => {
                    let scores = layer.scores(z.row(i));
                    let mut cands: Vec<u32> = (0..k as u32).filter(|&l| !pos.contains(l)).collect();
                    let cmp = |a: &u32, b: &u32| {
                        scores[*b as usize].total_cmp(&scores[*a as usize]).then(a.cmp(b))
                    };
                    if take < cands.len() && take > 0 {
                        cands.select_nth_unstable_by(take - 1, cmp);
                    }
                    cands.truncate(take);
                    cands
                }
                None => {
                    let mut rng = seed::rng(seed::derive_indexed(seed, i as u64));
                    let picks = sample(&mut rng, n_neg, take).into_vec();
                    let negatives: Vec<u32> = (0..k as u32).filter(|&l| !pos.contains(l)).collect();
                    picks.into_iter().map(|p| negatives[p]).collect()
                }
            };
            out.sort_unstable();
            out
        })
        .collect();
    Ok(lists)
}

/// Initializes `E^(t)` from the parent layer through `C^(t)` (`K_t x K_{t-1}`),
/// adding `N(0, sigma^2)` noise. Without a parent the layer is pure noise.
pub fn bootstrap_init(
    parent: Option<&LabelEmbeddingLayer>,
    cluster: &SparseMatrix,
    dim: usize,
    sigma: f32,
    seed: u64,
) -> Result<LabelEmbeddingLayer> {
    let k = cluster.n_rows();
    let mut embeddings = DenseMatrix::zeros(k, dim);
    let level = match parent {
        Some(p) => {
            if p.embeddings.n_cols() != dim || p.n_nodes() != cluster.n_cols() {
                return Err(Error::Shape(format!(
                    "parent layer {}x{} for a {}x{} cluster matrix at width {dim}",
                    p.n_nodes(),
                    p.embeddings.n_cols(),
                    cluster.n_rows(),
                    cluster.n_cols()
                )));
            }
            for c in 0..k {
                let row = cluster.row(c);
                if row.nnz() != 1 {
                    return Err(Error::Shape(format!("node {c} must have exactly one parent")));
                }
                let parent_row = p.embeddings.row(row.indices[0] as usize);
                embeddings.row_mut(c).copy_from_slice(parent_row);
            }
            p.level + 1
        }
        None => 1,
    };
    if sigma > 0.0 {
        let normal = Normal::new(0.0f32, sigma).map_err(|e| Error::Config(e.to_string()))?;
        let mut rng = seed::rng(seed);
        for v in embeddings.values_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(LabelEmbeddingLayer { level, embeddings })
}

/// Fits the encoder and every level's label embeddings.
///
/// `features` rows are l2-normalized before encoding; [`extract_dense_features`]
/// applies the same normalization.
pub fn train_matcher(
    features: &SparseMatrix,
    labels: &SparseMatrix,
    tree: &LabelTree,
    config: &MatchConfig,
) -> Result<MatcherModel> {
    config.validate()?;
    if features.n_rows() != labels.n_rows() {
        return Err(Error::Shape(format!(
            "{} texts with {} label rows",
            features.n_rows(),
            labels.n_rows()
        )));
    }
    if features.n_rows() == 0 {
        return Err(Error::Data("matcher needs at least one training text".into()));
    }
    let x = features.l2_normalize_rows();
    let level_labels = propagate_labels(labels, tree)?;
    let depth = tree.depth();
    let n = x.n_rows();
    let mut encoder = EncoderParams::init(x.n_cols(), config.dim, seed::derive(config.seed, "matcher/encoder"));
    let mut layers: Vec<LabelEmbeddingLayer> = Vec::with_capacity(depth);
    let mut loss_history = Vec::with_capacity(depth);
    if config.match_last_level_only && depth > 1 {
        info!("matcher: training only level {depth}; shallower levels keep bootstrap values");
    }

    for t in 1..=depth {
        let level_seed = seed::derive_indexed(seed::derive(config.seed, "matcher/level"), t as u64);
        let mut layer = bootstrap_init(
            layers.last(),
            tree.cluster_matrix(t),
            config.dim,
            config.init_sigma,
            seed::derive(level_seed, "bootstrap"),
        )?;
        let y = &level_labels[t - 1];
        let train_level = !config.match_last_level_only || t == depth;
        let mut history = Vec::new();
        if train_level && config.steps_per_level > 0 {
            // Mined once per level with the bootstrapped layer and current encoder.
            let mined = if t > 1 {
                let z_all = encode_rows(&encoder, &x)?;
                Some(mine_hard_negatives(&z_all, Some(&layer), y, config.n_hard_neg, 0)?)
            } else {
                None
            };
            let mut rng = seed::rng(seed::derive(level_seed, "batches"));
            let neg_seed = seed::derive(level_seed, "uniform_negatives");
            let bs = config.batch_size.min(n);
            for step in 0..config.steps_per_level {
                let mut ids = sample(&mut rng, n, bs).into_vec();
                ids.sort_unstable();
                let xb = x.select_rows(&ids);
                let yb = y.select_rows(&ids);
                let z = encode_rows(&encoder, &xb)?;
                let negatives = match &mined {
                    Some(m) => ids.iter().map(|&i| m[i].clone()).collect(),
                    None => mine_hard_negatives(
                        &z,
                        None,
                        &yb,
                        config.n_hard_neg,
                        seed::derive_indexed(neg_seed, step as u64),
                    )?,
                };
                let positives = (0..bs).map(|i| yb.row(i).indices.to_vec()).collect();
                let batch = MatchBatch::new(ids, z, positives, negatives)?;
                let grad = matching_loss_grad(&batch, &layer, config.lambda, config.tau)?;
                if !grad.loss.is_finite() {
                    return Err(Error::Numeric(format!("matcher loss diverged at level {t}, step {step}")));
                }
                let enc_grad = encoder.backward(&xb, &grad.grad_z);
                encoder.apply(&enc_grad, config.lr_encoder);
                for (&l, g) in &grad.grad_e {
                    for (w, &gi) in layer.embeddings.row_mut(l as usize).iter_mut().zip(g) {
                        *w -= config.lr_label * gi as f32;
                    }
                }
                history.push(grad.loss);
            }
            let head = history.len().div_ceil(10);
            let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            debug!(
                "matcher level {t}: K={} loss {:.4} -> {:.4}",
                layer.n_nodes(),
                mean(&history[..head]),
                mean(&history[history.len() - head..])
            );
        }
        if !layer.embeddings.is_finite() || !encoder.feature_embeddings.is_finite() {
            return Err(Error::Numeric(format!("matcher parameters became non-finite at level {t}")));
        }
        layers.push(layer);
        loss_history.push(history);
    }
    Ok(MatcherModel { encoder, layers, loss_history })
}

/// Dense text features: row `i` encodes the l2-normalized row `i` of `features`.
pub fn extract_dense_features(model: &MatcherModel, features: &SparseMatrix) -> Result<DenseMatrix> {
    encode_rows(&model.encoder, &features.l2_normalize_rows())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hlt::HltConfig;
    use crate::synthetic::two_group_dataset;

    fn layer(rows: &[Vec<f32>]) -> LabelEmbeddingLayer {
        LabelEmbeddingLayer { level: 1, embeddings: DenseMatrix::from_rows(rows[0].len(), rows).unwrap() }
    }

    #[test]
    fn mined_negatives_are_top_scores() {
        let l = layer(&[vec![1.0], vec![3.0], vec![2.0], vec![3.0], vec![0.5]]);
        let z = DenseMatrix::from_rows(1, &[vec![1.0]]).unwrap();
        let y = SparseMatrix::from_label_sets(5, &[vec![1]]).unwrap();
        // Node 1 is positive; 3 wins, then 2.
        let m = mine_hard_negatives(&z, Some(&l), &y, 2, 0).unwrap();
        assert_eq!(m, vec![vec![2, 3]]);
        let all = mine_hard_negatives(&z, Some(&l), &y, 10, 0).unwrap();
        assert_eq!(all, vec![vec![0, 2, 3, 4]]);
    }

    #[test]
    fn ties_break_by_smaller_id() {
        let l = layer(&[vec![1.0], vec![1.0], vec![1.0], vec![1.0]]);
        let z = DenseMatrix::from_rows(1, &[vec![1.0]]).unwrap();
        let y = SparseMatrix::from_label_sets(4, &[vec![0]]).unwrap();
        assert_eq!(mine_hard_negatives(&z, Some(&l), &y, 2, 0).unwrap(), vec![vec![1, 2]]);
    }

    #[test]
    fn uniform_negatives_are_seeded_and_exclude_positives() {
        let z = DenseMatrix::zeros(3, 2);
        let y = SparseMatrix::from_label_sets(20, &[vec![0, 1], vec![5], vec![19]]).unwrap();
        let a = mine_hard_negatives(&z, None, &y, 4, 7).unwrap();
        assert_eq!(a, mine_hard_negatives(&z, None, &y, 4, 7).unwrap());
        for (i, list) in a.iter().enumerate() {
            assert_eq!(list.len(), 4);
            assert!(list.iter().all(|&l| !y.row(i).contains(l)));
        }
    }

    #[test]
    fn zero_noise_bootstrap_copies_parents() {
        let parent = layer(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let c = SparseMatrix::from_label_sets(2, &[vec![0], vec![0], vec![1]]).unwrap();
        let child = bootstrap_init(Some(&parent), &c, 2, 0.0, 1).unwrap();
        assert_eq!(child.level, 2);
        assert_eq!(child.embeddings.values(), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0]);
        assert!(bootstrap_init(Some(&parent), &c, 3, 0.0, 1).is_err());
    }

    #[test]
    fn bootstrap_noise_has_requested_scale() {
        let d = 64;
        let parent = LabelEmbeddingLayer { level: 1, embeddings: DenseMatrix::zeros(1, d) };
        let c = SparseMatrix::ones(500, 1);
        let child = bootstrap_init(Some(&parent), &c, d, 0.01, 3).unwrap();
        let mean_norm: f64 = child
            .embeddings
            .rows()
            .map(|r| crate::data::dot_f64(r, r).sqrt())
            .sum::<f64>()
            / 500.0;
        let expected = 0.01 * (d as f64).sqrt();
        assert!((mean_norm - expected).abs() < 0.05 * expected, "{mean_norm} vs {expected}");
        let root = bootstrap_init(None, &c, d, 0.01, 3).unwrap();
        assert_eq!(root.level, 1);
        let var = root.embeddings.values().iter().map(|&v| (v as f64).powi(2)).sum::<f64>()
            / root.embeddings.values().len() as f64;
        assert!((var.sqrt() - 0.01).abs() < 1e-3);
    }

    fn small_model(lambda: f64) -> (MatcherModel, crate::data::Dataset, LabelTree) {
        let (train, _) = two_group_dataset(600, 0, 11).unwrap();
        let tree = crate::hlt::build_tree_from_points(
            &crate::pipeline::pifa_embeddings(&train.features_sparse, &train.labels).unwrap(),
            &HltConfig { branching: 2, max_leaf: 3, ..HltConfig::default() },
        )
        .unwrap();
        let config = MatchConfig { lambda, steps_per_level: 150, dim: 16, ..MatchConfig::default() };
        let model = train_matcher(&train.features_sparse, &train.labels, &tree, &config).unwrap();
        (model, train, tree)
    }

    #[test]
    fn training_aligns_texts_with_labels() {
        for lambda in [0.0, 0.5, 1.0] {
            let (model, train, tree) = small_model(lambda);
            assert_eq!(model.depth(), tree.depth());
            let z = extract_dense_features(&model, &train.features_sparse).unwrap();
            let leaves = model.layer(tree.depth());
            let hits = (0..train.len())
                .filter(|&i| {
                    let s = leaves.scores(z.row(i));
                    let best = (0..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b]).then(b.cmp(&a))).unwrap();
                    train.labels.row(i).contains(best as u32)
                })
                .count();
            assert!(hits as f64 >= 0.9 * train.len() as f64, "lambda {lambda}: {hits}/{}", train.len());
            for h in &model.loss_history {
                let k = h.len() / 10;
                let first: f64 = h[..k].iter().sum::<f64>() / k as f64;
                let last: f64 = h[h.len() - k..].iter().sum::<f64>() / k as f64;
                assert!(last < first, "lambda {lambda}: {first} -> {last}");
            }
        }
    }

    #[test]
    fn features_are_unit_rows() {
        let (model, train, _) = small_model(0.5);
        let z = extract_dense_features(&model, &train.features_sparse).unwrap();
        for r in z.rows() {
            assert!((crate::data::dot_f64(r, r) - 1.0).abs() < 1e-5);
        }
        let dup = train.features_sparse.select_rows(&[3, 3]);
        let zd = extract_dense_features(&model, &dup).unwrap();
        assert_eq!(zd.row(0), zd.row(1));
    }

    #[test]
    fn save_load_round_trip() {
        let (model, _, _) = small_model(1.0);
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path()).unwrap();
        let back = MatcherModel::load(dir.path()).unwrap();
        assert_eq!(back.encoder, model.encoder);
        assert_eq!(back.layers, model.layers);
        assert_eq!(back.loss_history, model.loss_history);
    }

    #[test]
    fn config_validation() {
        assert!(MatchConfig { tau: 0.0, ..MatchConfig::default() }.validate().is_err());
        assert!(MatchConfig { lambda: -0.1, ..MatchConfig::default() }.validate().is_err());
        assert_eq!(MatchConfig::default().tau, 0.05);
    }
}
