//! Beam search through the label tree with per-level linear scorers.
//!
//! A node's path score is the product of the sigmoid scores of the node and
//! its ancestors, multiplied top-down in `f32`. Ties are broken by the smaller
//! node id everywhere.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{SparseMatrix, SparseRow};
use crate::error::{Error, Result};
use crate::hlt::LabelTree;
use crate::ranker::{RankerLayer, RankerModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub beam_size: usize,
    pub top_k: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self { beam_size: 10, top_k: 10 }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.top_k == 0 {
            return Err(Error::Config("beam size and top-k must be at least 1".into()));
        }
        Ok(())
    }
}

/// `sigmoid(margin)` evaluated in `f64`, rounded to `f32`. Underflows to 0 only
/// for margins below about -103.
pub fn node_score(layer: &RankerLayer, node: usize, x: SparseRow<'_>, bias_feature: f32) -> f32 {
    let m = layer.margin(node, x, bias_feature);
    (1.0 / (1.0 + (-m).exp())) as f32
}

fn rank_desc(a: &(u32, f32), b: &(u32, f32)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Keeps the `k` best entries, sorted by descending score then ascending id.
fn top_k(mut cands: Vec<(u32, f32)>, k: usize) -> Vec<(u32, f32)> {
    if k < cands.len() {
        cands.select_nth_unstable_by(k - 1, rank_desc);
        cands.truncate(k);
    }
    cands.sort_unstable_by(rank_desc);
    cands
}

fn scored_level(
    x: SparseRow<'_>,
    tree: &LabelTree,
    model: &RankerModel,
    t: usize,
    frontier: &[(u32, f32)],
) -> Vec<(u32, f32)> {
    let layer = model.layer(t);
    if t == 1 {
        return (0..layer.n_nodes())
            .map(|l| (l as u32, node_score(layer, l, x, model.bias_feature)))
            .collect();
    }
    frontier
        .iter()
        .flat_map(|&(parent, path)| {
            tree.children(t, parent as usize)
                .iter()
                .map(move |&c| (c, path * node_score(layer, c as usize, x, model.bias_feature)))
        })
        .collect()
}

/// Kept beam after scoring levels `1..=level`: at most `beam_size` nodes of
/// that level with their path scores.
pub fn beam_frontier(
    x: SparseRow<'_>,
    tree: &LabelTree,
    model: &RankerModel,
    level: usize,
    beam_size: usize,
) -> Vec<(u32, f32)> {
    let mut frontier = Vec::new();
    for t in 1..=level {
        frontier = top_k(scored_level(x, tree, model, t, &frontier), beam_size);
    }
    frontier
}

fn check(x_cols: usize, tree: &LabelTree, model: &RankerModel, config: &BeamConfig) -> Result<()> {
    config.validate()?;
    if x_cols != model.n_features {
        return Err(Error::Shape(format!(
            "query width {x_cols} for a ranker over {} features",
            model.n_features
        )));
    }
    if model.depth() != tree.depth() || (1..=tree.depth()).any(|t| model.layer(t).n_nodes() != tree.level_size(t)) {
        return Err(Error::Shape("ranker layers do not match the tree levels".into()));
    }
    Ok(())
}

/// Top labels of one query with their path scores, best first.
pub fn beam_search(
    x: SparseRow<'_>,
    n_cols: usize,
    tree: &LabelTree,
    model: &RankerModel,
    config: &BeamConfig,
) -> Result<Vec<(u32, f32)>> {
    check(n_cols, tree, model, config)?;
    Ok(search(x, tree, model, config))
}

fn search(x: SparseRow<'_>, tree: &LabelTree, model: &RankerModel, config: &BeamConfig) -> Vec<(u32, f32)> {
    let depth = tree.depth();
    let frontier = beam_frontier(x, tree, model, depth - 1, config.beam_size);
    top_k(scored_level(x, tree, model, depth, &frontier), config.top_k)
}

/// Beam search over every row; `N x L` with at most `top_k` entries per row.
pub fn predict_batch(
    x: &SparseMatrix,
    tree: &LabelTree,
    model: &RankerModel,
    config: &BeamConfig,
) -> Result<SparseMatrix> {
    check(x.n_cols(), tree, model, config)?;
    let rows: Vec<Vec<(u32, f32)>> = (0..x.n_rows())
        .into_par_iter()
        .map(|i| {
            let mut r = search(x.row(i), tree, model, config);
            r.sort_unstable_by_key(|e| e.0);
            r
        })
        .collect();
    SparseMatrix::from_rows(tree.n_labels(), rows)
}

/// Ranked `(label, score)` lists from a score matrix, best first.
pub fn ranked_rows(scores: &SparseMatrix) -> Vec<Vec<(u32, f32)>> {
    scores
        .rows()
        .map(|r| {
            let mut v: Vec<(u32, f32)> = r.iter().collect();
            v.sort_unstable_by(rank_desc);
            v
        })
        .collect()
}
