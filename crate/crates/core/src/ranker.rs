//! Per-level one-vs-rest linear rankers trained on sampled negatives.
//!
//! At level `t` each node sees only the instances in its column of the
//! sampling matrix `M^(t)`: the teacher-forcing candidates (children of the
//! instance's true parents) plus the candidates the already-trained upper
//! levels would reach at inference time. Each column minimizes
//! `alpha |w|^2 + sum_i c_i max(0, 1 - s_i w.x_i)^2` by coordinate descent.

use std::fs;
use std::path::Path;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_dense, load_sparse, save_dense, save_sparse, DenseMatrix, SparseMatrix, SparseRow};
use crate::error::{Error, Result};
use crate::hlt::{propagate_labels, LabelTree};
use crate::inference::beam_frontier;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RankerConfig {
    /// L2 coefficient.
    pub alpha: f64,
    /// Coordinate-descent passes per column.
    pub epochs: usize,
    /// Feature weights with smaller magnitude are dropped after training.
    pub prune_eps: f32,
    /// Value of the implicit constant feature; 0 disables the bias term.
    pub bias: f32,
    /// Loss weight of positive instances.
    pub positive_weight: f64,
    /// Loss weight of sampled negative instances.
    pub negative_weight: f64,
    /// Add beam-reachable candidates to the teacher-forcing negatives.
    pub use_man: bool,
    /// Beam width used to produce those candidates.
    pub beam_size: usize,
}

impl Default for RankerConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            epochs: 10,
            prune_eps: 1e-3,
            bias: 1.0,
            positive_weight: 1.0,
            negative_weight: 1.0,
            use_man: true,
            beam_size: 10,
        }
    }
}

impl RankerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.prune_eps >= 0.0 && self.bias.is_finite() && self.bias >= 0.0) {
            return Err(Error::Config("prune_eps and bias must be non-negative".into()));
        }
        if !(self.positive_weight > 0.0 && self.negative_weight > 0.0) {
            return Err(Error::Config("instance weights must be positive".into()));
        }
        if self.beam_size == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Linear scorers of the `K_t` nodes of one tree level.
#[derive(Clone, Debug, PartialEq)]
pub struct RankerLayer {
    /// 1-based tree level.
    pub level: usize,
    /// `K_t x d`: row `l` holds the feature weights of node `l`.
    pub weights: SparseMatrix,
    /// Weight of the constant feature, one per node.
    pub bias: Vec<f32>,
    /// Nodes that had no sampled instances; their scorers are zero.
    pub empty_columns: Vec<u32>,
}

impl RankerLayer {
    pub fn n_nodes(&self) -> usize {
        self.weights.n_rows()
    }

    /// Raw margin `w_l . x + b_l * bias`, accumulated in `f64` in ascending
    /// feature order.
    pub fn margin(&self, node: usize, x: SparseRow<'_>, bias_feature: f32) -> f64 {
        let w = self.weights.row(node);
        let mut acc = 0f64;
        for (j, v) in x.iter() {
            if let Ok(pos) = w.indices.binary_search(&j) {
                acc += w.values[pos] as f64 * v as f64;
            }
        }
        acc + self.bias[node] as f64 * bias_feature as f64
    }
}

/// Rankers of every tree level.
#[derive(Clone, Debug, PartialEq)]
pub struct RankerModel {
    /// `layers[t - 1]` is level `t`.
    pub layers: Vec<RankerLayer>,
    pub bias_feature: f32,
    pub n_features: usize,
}

#[derive(Serialize, Deserialize)]
struct RankerManifest {
    format_version: String,
    n_features: usize,
    bias_feature: f32,
    level_sizes: Vec<usize>,
    empty_columns: Vec<Vec<u32>>,
}

impl RankerModel {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, t: usize) -> &RankerLayer {
        &self.layers[t - 1]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for layer in &self.layers {
            save_sparse(dir.join(format!("weights_{}.txt", layer.level)), &layer.weights)?;
            let bias = DenseMatrix::new(1, layer.bias.len(), layer.bias.clone())?;
            save_dense(dir.join(format!("bias_{}.vec", layer.level)), &bias)?;
        }
        let manifest = RankerManifest {
            format_version: "1".into(),
            n_features: self.n_features,
            bias_feature: self.bias_feature,
            level_sizes: self.layers.iter().map(|l| l.n_nodes()).collect(),
            empty_columns: self.layers.iter().map(|l| l.empty_columns.clone()).collect(),
        };
        let path = dir.join("ranker.json");
        let json = serde_json::to_string_pretty(&manifest).expect("ranker manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("ranker.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: RankerManifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if manifest.format_version != "1" {
            return Err(Error::Data(format!(
                "unsupported ranker format version {}",
                manifest.format_version
            )));
        }
        if manifest.empty_columns.len() != manifest.level_sizes.len() {
            return Err(Error::Data("ranker manifest lists are inconsistent".into()));
        }
        let mut layers = Vec::new();
        for (t, (&k, empty)) in manifest.level_sizes.iter().zip(manifest.empty_columns).enumerate() {
            let level = t + 1;
            let weights = load_sparse(dir.join(format!("weights_{level}.txt")))?;
            let bias = load_dense(dir.join(format!("bias_{level}.vec")))?.into_values();
            if weights.n_rows() != k || weights.n_cols() != manifest.n_features || bias.len() != k {
                return Err(Error::Data(format!("ranker level {level} has the wrong shape")));
            }
            layers.push(RankerLayer { level, weights, bias, empty_columns: empty });
        }
        Ok(Self { layers, bias_feature: manifest.bias_feature, n_features: manifest.n_features })
    }
}

/// Teacher-forcing candidates: node `l` is sampled for instance `i` iff the
/// parent of `l` is positive in `parent_labels` row `i`.
///
/// `parent_labels` is `N x K_{t-1}` (all ones at the root) and `cluster` is
/// `C^(t)`, `K_t x K_{t-1}`.
pub fn build_tfn(parent_labels: &SparseMatrix, cluster: &SparseMatrix) -> Result<SparseMatrix> {
    if parent_labels.n_cols() != cluster.n_cols() {
        return Err(Error::Shape(format!(
            "parent labels over {} nodes with a cluster matrix over {}",
            parent_labels.n_cols(),
            cluster.n_cols()
        )));
    }
    Ok(parent_labels.spmm(&cluster.transpose())?.binarize())
}

/// Predicted candidates: instance `i` samples every node listed for it.
pub fn build_man(predictions: &[Vec<u32>], n_nodes: usize) -> Result<SparseMatrix> {
    SparseMatrix::from_label_sets(n_nodes, predictions)
}

/// Per-column solver output, exposed for inspection.
#[derive(Clone, Debug)]
pub struct ColumnFit {
    /// Weights over the global feature ids, ascending, before pruning.
    pub weights: Vec<(u32, f64)>,
    pub bias: f64,
    /// Objective after initialization and after each epoch.
    pub objective: Vec<f64>,
}

/// Sampled instances of one column with their targets.
struct ColumnData {
    /// Global feature id of each local feature.
    features: Vec<u32>,
    /// Per local feature: `(local instance, value)` entries.
    entries: Vec<Vec<(u32, f64)>>,
    signs: Vec<f64>,
    costs: Vec<f64>,
}

impl ColumnData {
    fn gather(x: &SparseMatrix, instances: &[u32], positive: &[bool], config: &RankerConfig) -> Self {
        let mut triples: Vec<(u32, u32, f64)> = Vec::new();
        for (r, &i) in instances.iter().enumerate() {
            for (j, v) in x.row(i as usize).iter() {
                if v != 0.0 {
                    triples.push((j, r as u32, v as f64));
                }
            }
        }
        triples.sort_unstable_by_key(|t| (t.0, t.1));
        let mut features = Vec::new();
        let mut entries: Vec<Vec<(u32, f64)>> = Vec::new();
        for (j, r, v) in triples {
            if features.last() != Some(&j) {
                features.push(j);
                entries.push(Vec::new());
            }
            entries.last_mut().expect("pushed above").push((r, v));
        }
        if config.bias > 0.0 {
            entries.push((0..instances.len() as u32).map(|r| (r, config.bias as f64)).collect());
        }
        let signs = positive.iter().map(|&p| if p { 1.0 } else { -1.0 }).collect();
        let costs = positive
            .iter()
            .map(|&p| if p { config.positive_weight } else { config.negative_weight })
            .collect();
        Self { features, entries, signs, costs }
    }
}

fn objective(alpha: f64, w: &[f64], slack: &[f64], costs: &[f64]) -> f64 {
    let reg: f64 = w.iter().map(|v| v * v).sum();
    let loss: f64 = slack.iter().zip(costs).map(|(&b, &c)| if b > 0.0 { c * b * b } else { 0.0 }).sum();
    alpha * reg + loss
}

const ARMIJO: f64 = 0.01;
const MAX_HALVINGS: usize = 30;

fn solve_column(data: &ColumnData, config: &RankerConfig) -> ColumnFit {
    let alpha = config.alpha;
    let n_coords = data.entries.len();
    let mut w = vec![0f64; n_coords];
    // slack_r = 1 - s_r w.x_r
    let mut slack = vec![1f64; data.signs.len()];
    let mut history = vec![objective(alpha, &w, &slack, &data.costs)];
    for _ in 0..config.epochs {
        let mut max_step = 0f64;
        for (j, col) in data.entries.iter().enumerate() {
            let mut grad = 2.0 * alpha * w[j];
            let mut hess = 2.0 * alpha;
            for &(r, v) in col {
                let b = slack[r as usize];
                if b > 0.0 {
                    let c = data.costs[r as usize];
                    grad -= 2.0 * c * data.signs[r as usize] * v * b;
                    hess += 2.0 * c * v * v;
                }
            }
            if grad.abs() < 1e-12 {
                continue;
            }
            let d = -grad / hess;
            let old: f64 = col
                .iter()
                .map(|&(r, _)| {
                    let b = slack[r as usize];
                    if b > 0.0 { data.costs[r as usize] * b * b } else { 0.0 }
                })
                .sum();
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_HALVINGS {
                let z = step * d;
                let new: f64 = col
                    .iter()
                    .map(|&(r, v)| {
                        let b = slack[r as usize] - data.signs[r as usize] * z * v;
                        if b > 0.0 { data.costs[r as usize] * b * b } else { 0.0 }
                    })
                    .sum();
                let delta = alpha * ((w[j] + z).powi(2) - w[j].powi(2)) + new - old;
                if delta <= ARMIJO * z * grad {
                    accepted = Some(z);
                    break;
                }
                step *= 0.5;
            }
            if let Some(z) = accepted {
                w[j] += z;
                for &(r, v) in col {
                    slack[r as usize] -= data.signs[r as usize] * z * v;
                }
                max_step = max_step.max(z.abs());
            }
        }
        history.push(objective(alpha, &w, &slack, &data.costs));
        if max_step < 1e-9 {
            break;
        }
    }
    let bias = if config.bias > 0.0 { w[n_coords - 1] } else { 0.0 };
    let weights = data.features.iter().copied().zip(w.iter().copied()).collect();
    ColumnFit { weights, bias, objective: history }
}

/// Fits one column on the given instances; `positive[r]` is the target of
/// `instances[r]`.
pub fn fit_column(x: &SparseMatrix, instances: &[u32], positive: &[bool], config: &RankerConfig) -> ColumnFit {
    solve_column(&ColumnData::gather(x, instances, positive, config), config)
}

/// Trains the scorers of one level on the instances sampled by `sampling`.
/// Sampled pairs that are positive in `labels` are positives; the rest are
/// negatives. Every positive of `labels` must be sampled.
pub fn train_layer(
    x: &SparseMatrix,
    labels: &SparseMatrix,
    sampling: &SparseMatrix,
    level: usize,
    config: &RankerConfig,
) -> Result<RankerLayer> {
    config.validate()?;
    if labels.n_rows() != x.n_rows() || sampling.n_rows() != x.n_rows() || labels.n_cols() != sampling.n_cols() {
        return Err(Error::Shape(format!(
            "features {}x{}, labels {}x{}, sampling {}x{}",
            x.n_rows(),
            x.n_cols(),
            labels.n_rows(),
            labels.n_cols(),
            sampling.n_rows(),
            sampling.n_cols()
        )));
    }
    let covered = labels.binarize();
    for i in 0..covered.n_rows() {
        let s = sampling.row(i);
        if let Some(l) = covered.row(i).indices.iter().find(|&&l| !s.contains(l)) {
            return Err(Error::Data(format!("positive ({i}, {l}) is missing from the sampling matrix")));
        }
    }
    let by_node = sampling.binarize().transpose();
    let labels_t = labels.binarize().transpose();
    let k = by_node.n_rows();
    let fits: Vec<ColumnFit> = (0..k)
        .into_par_iter()
        .map(|l| {
            let instances = by_node.row(l).indices;
            let pos = labels_t.row(l);
            let positive: Vec<bool> = instances.iter().map(|&i| pos.contains(i)).collect();
            fit_column(x, instances, &positive, config)
        })
        .collect();

    let empty_columns: Vec<u32> = (0..k as u32).filter(|&l| by_node.row_nnz(l as usize) == 0).collect();
    if !empty_columns.is_empty() {
        warn!("ranker level {level}: {} nodes have no sampled instances", empty_columns.len());
    }
    let mut bias = Vec::with_capacity(k);
    let mut rows = Vec::with_capacity(k);
    for fit in fits {
        bias.push(fit.bias as f32);
        rows.push(
            fit.weights
                .into_iter()
                .map(|(j, v)| (j, v as f32))
                .filter(|&(_, v)| v.abs() >= config.prune_eps && v != 0.0)
                .collect::<Vec<_>>(),
        );
    }
    let weights = SparseMatrix::from_rows(x.n_cols(), rows)?;
    if weights.values().iter().chain(&bias).any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("ranker level {level} produced non-finite weights")));
    }
    debug!("ranker level {level}: {k} nodes, {} weights kept", weights.nnz());
    Ok(RankerLayer { level, weights, bias, empty_columns })
}

/// Sampling matrices and layers, trained top-down so that each level's
/// beam-reachable candidates come from the levels above it.
pub fn train_ranker(
    x: &SparseMatrix,
    labels: &SparseMatrix,
    tree: &LabelTree,
    config: &RankerConfig,
) -> Result<RankerModel> {
    config.validate()?;
    if x.n_rows() != labels.n_rows() {
        return Err(Error::Shape(format!("{} feature rows with {} label rows", x.n_rows(), labels.n_rows())));
    }
    let level_labels = propagate_labels(labels, tree)?;
    let mut model = RankerModel { layers: Vec::new(), bias_feature: config.bias, n_features: x.n_cols() };
    let root = SparseMatrix::ones(x.n_rows(), 1);
    for t in 1..=tree.depth() {
        let parents = if t == 1 { &root } else { &level_labels[t - 2] };
        let mut sampling = build_tfn(parents, tree.cluster_matrix(t))?;
        if config.use_man && t > 1 {
            let k_t = tree.level_size(t);
            let reached: Vec<Vec<u32>> = (0..x.n_rows())
                .into_par_iter()
                .map(|i| {
                    let frontier = beam_frontier(x.row(i), tree, &model, t - 1, config.beam_size);
                    let mut kids: Vec<u32> = frontier
                        .iter()
                        .flat_map(|&(node, _)| tree.children(t, node as usize).iter().copied())
                        .collect();
                    kids.sort_unstable();
                    kids
                })
                .collect();
            sampling = sampling.union_pattern(&build_man(&reached, k_t)?)?;
        }
        let layer = train_layer(x, &level_labels[t - 1], &sampling, t, config)?;
        model.layers.push(layer);
    }
    Ok(model)
}
