//! Generators and naive oracles shared by the integration suites.
#![allow(dead_code, clippy::needless_range_loop)]

pub mod grad;

use std::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xmatch::data::{DenseMatrix, SparseMatrix, SparseRow};
use xmatch::hlt::{HltConfig, LabelTree};
use xmatch::metrics::PropensityModel;
use xmatch::ranker::{RankerLayer, RankerModel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_sparse(rng: &mut impl Rng, n_rows: usize, n_cols: usize, density: f64) -> SparseMatrix {
    let mut rows = Vec::with_capacity(n_rows);
    for _ in 0..n_rows {
        let mut row = Vec::new();
        for j in 0..n_cols as u32 {
            if rng.random_bool(density) {
                row.push((j, rng.random_range(-2.0f32..2.0)));
            }
        }
        rows.push(row);
    }
    SparseMatrix::from_rows(n_cols, rows).unwrap()
}

pub fn random_dense(rng: &mut impl Rng, n_rows: usize, n_cols: usize) -> DenseMatrix {
    DenseMatrix::new(
        n_rows,
        n_cols,
        (0..n_rows * n_cols).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
    )
    .unwrap()
}

pub fn unit_rows(rng: &mut impl Rng, n_rows: usize, n_cols: usize) -> DenseMatrix {
    random_dense(rng, n_rows, n_cols).l2_normalize_rows()
}

pub fn to_dense64(m: &SparseMatrix) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; m.n_cols()]; m.n_rows()];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in m.row(i).iter() {
            row[j as usize] = v as f64;
        }
    }
    out
}

pub fn dense_matmul(a: &[Vec<f64>], b: &[Vec<f64>], inner: usize, n_cols: usize) -> Vec<Vec<f64>> {
    a.iter()
        .map(|ar| (0..n_cols).map(|j| (0..inner).map(|k| ar[k] * b[k][j]).sum()).collect())
        .collect()
}

// ---------------------------------------------------------------- metrics --

fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 2) as f64).log2()
}

fn is_hit(y: &[u32], l: u32) -> bool {
    y.contains(&l)
}

pub fn naive_precision(y: &[u32], pred: &[u32], k: usize) -> f64 {
    let mut hits = 0usize;
    for r in 0..k.min(pred.len()) {
        if is_hit(y, pred[r]) {
            hits += 1;
        }
    }
    hits as f64 / k as f64
}

pub fn naive_ndcg(y: &[u32], pred: &[u32], k: usize) -> f64 {
    let mut dcg = 0.0;
    for r in 0..k.min(pred.len()) {
        if is_hit(y, pred[r]) {
            dcg += discount(r);
        }
    }
    let mut ideal = 0.0;
    for r in 0..k.min(y.len()) {
        ideal += discount(r);
    }
    dcg / ideal
}

pub fn naive_psp(y: &[u32], pred: &[u32], k: usize, p: &[f64]) -> f64 {
    let mut s = 0.0;
    for r in 0..k.min(pred.len()) {
        if is_hit(y, pred[r]) {
            s += 1.0 / p[pred[r] as usize];
        }
    }
    s / k as f64
}

pub fn naive_psndcg(y: &[u32], pred: &[u32], k: usize, p: &[f64]) -> f64 {
    let mut dcg = 0.0;
    for r in 0..k.min(pred.len()) {
        if is_hit(y, pred[r]) {
            dcg += discount(r) / p[pred[r] as usize];
        }
    }
    let ideal: f64 = (0..k).map(discount).sum();
    dcg / ideal
}

/// Random truth set (sorted, non-empty) and ranked prediction list over `n_labels`.
pub fn random_instance(rng: &mut impl Rng, n_labels: usize) -> (Vec<u32>, Vec<u32>) {
    let mut all: Vec<u32> = (0..n_labels as u32).collect();
    all.shuffle(rng);
    let n_true = rng.random_range(1..=n_labels.min(6));
    let mut y = all[..n_true].to_vec();
    y.sort_unstable();
    all.shuffle(rng);
    let n_pred = rng.random_range(0..=n_labels.min(8));
    (y, all[..n_pred].to_vec())
}

pub fn random_propensities(rng: &mut impl Rng, n_labels: usize) -> PropensityModel {
    PropensityModel {
        a: 0.55,
        b: 1.5,
        c: 0.0,
        propensities: (0..n_labels).map(|_| rng.random_range(0.05..=1.0)).collect(),
    }
}

// ------------------------------------------------------------------- tree --

/// Random tree over `n_labels` labels: level sizes grow strictly and every
/// node gets at least one child.
pub fn random_tree(rng: &mut impl Rng, n_labels: usize) -> LabelTree {
    let depth = rng.random_range(1..=4usize);
    let mut sizes = vec![n_labels];
    while sizes.len() < depth {
        let below = *sizes.last().unwrap();
        if below < 2 {
            break;
        }
        sizes.push(rng.random_range(1..below));
    }
    sizes.push(1);
    sizes.reverse();
    let mut assignments = Vec::new();
    for w in sizes.windows(2) {
        let (parents, nodes) = (w[0], w[1]);
        let mut parent_of: Vec<u32> = (0..nodes).map(|i| (i % parents) as u32).collect();
        parent_of.shuffle(rng);
        let sets: Vec<Vec<u32>> = parent_of.into_iter().map(|p| vec![p]).collect();
        assignments.push(SparseMatrix::from_label_sets(parents, &sets).unwrap());
    }
    LabelTree::from_assignments(2, assignments).unwrap()
}

/// Random per-level scorers. Values are drawn from a small grid and some rows
/// are copied so that ties in both node and path scores actually occur.
pub fn random_ranker(rng: &mut impl Rng, tree: &LabelTree, n_features: usize) -> RankerModel {
    let grid = |rng: &mut dyn rand::RngCore| (rng.random_range(-4i32..=4) as f32) * 0.25;
    let layers = (1..=tree.depth())
        .map(|t| {
            let k = tree.level_size(t);
            let mut rows: Vec<Vec<(u32, f32)>> = Vec::with_capacity(k);
            let mut bias = Vec::with_capacity(k);
            for i in 0..k {
                if i > 0 && rng.random_bool(0.2) {
                    let src = rng.random_range(0..i);
                    rows.push(rows[src].clone());
                    bias.push(bias[src]);
                    continue;
                }
                let mut row = Vec::new();
                for j in 0..n_features as u32 {
                    let v = grid(rng);
                    if v != 0.0 && rng.random_bool(0.5) {
                        row.push((j, v));
                    }
                }
                rows.push(row);
                bias.push(grid(rng));
            }
            RankerLayer {
                level: t,
                weights: SparseMatrix::from_rows(n_features, rows).unwrap(),
                bias,
                empty_columns: Vec::new(),
            }
        })
        .collect();
    RankerModel { layers, bias_feature: 1.0, n_features }
}

fn oracle_node_score(weights: &[f32], bias: f32, bias_feature: f32, x: SparseRow<'_>) -> f32 {
    let mut m = 0f64;
    for (j, v) in x.iter() {
        let w = weights[j as usize];
        if w != 0.0 {
            m += w as f64 * v as f64;
        }
    }
    m += bias as f64 * bias_feature as f64;
    (1.0 / (1.0 + (-m).exp())) as f32
}

/// Scores every leaf by its full root-to-leaf product and sorts by descending
/// score, then ascending id.
pub fn exhaustive_ranking(x: SparseRow<'_>, tree: &LabelTree, model: &RankerModel) -> Vec<(u32, f32)> {
    let depth = tree.depth();
    let dense: Vec<Vec<Vec<f64>>> = model.layers.iter().map(|l| to_dense64(&l.weights)).collect();
    let mut out: Vec<(u32, f32)> = (0..tree.n_labels())
        .map(|leaf| {
            let mut path = vec![leaf];
            for t in (2..=depth).rev() {
                path.push(tree.parent(t, *path.last().unwrap()));
            }
            path.reverse();
            let mut score = 1f32;
            for (t, &node) in path.iter().enumerate() {
                let w: Vec<f32> = dense[t][node].iter().map(|&v| v as f32).collect();
                let s = oracle_node_score(&w, model.layers[t].bias[node], model.bias_feature, x);
                score = if t == 0 { s } else { score * s };
            }
            (leaf as u32, score)
        })
        .collect();
    out.sort_by(|a, b| match b.1.total_cmp(&a.1) {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    out
}

/// Labels under every node of level `t`.
pub fn leaves_under(tree: &LabelTree, t: usize) -> Vec<Vec<u32>> {
    let depth = tree.depth();
    let mut groups = vec![Vec::new(); tree.level_size(t)];
    for leaf in 0..tree.n_labels() {
        let mut node = leaf;
        for s in ((t + 1)..=depth).rev() {
            node = tree.parent(s, node);
        }
        groups[node].push(leaf as u32);
    }
    groups
}

/// Checks balance, completeness and leaf capacity of a built tree.
pub fn check_tree_invariants(tree: &LabelTree, n_labels: usize, config: &HltConfig) -> Result<(), String> {
    if tree.n_labels() != n_labels {
        return Err(format!("tree over {} labels, expected {n_labels}", tree.n_labels()));
    }
    let depth = tree.depth();
    if depth != config.depth_for(n_labels) {
        return Err(format!("depth {depth}, expected {}", config.depth_for(n_labels)));
    }
    for t in 1..depth {
        let groups = leaves_under(tree, t);
        let mut seen = vec![false; n_labels];
        for g in &groups {
            if g.is_empty() {
                return Err(format!("empty cluster at level {t}"));
            }
            for &l in g {
                if std::mem::replace(&mut seen[l as usize], true) {
                    return Err(format!("label {l} in two clusters at level {t}"));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(format!("level {t} does not cover every label"));
        }
        let parent_groups = if t == 1 { vec![(0..n_labels as u32).collect()] } else { leaves_under(tree, t - 1) };
        for (p, pg) in parent_groups.iter().enumerate() {
            let kids = tree.children(t, p);
            if kids.len() != config.branching.min(pg.len()) {
                return Err(format!("node {p} of level {} has {} children", t - 1, kids.len()));
            }
            let sizes: Vec<usize> = kids.iter().map(|&c| groups[c as usize].len()).collect();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            if hi - lo > 1 {
                return Err(format!("unbalanced split under level {} node {p}: {sizes:?}", t - 1));
            }
        }
    }
    if depth > 1 && leaves_under(tree, depth - 1).iter().any(|g| g.len() > config.max_leaf) {
        return Err("a leaf cluster exceeds max_leaf".into());
    }
    Ok(())
}

/// `Y^(t)` by looking up each positive label's ancestor at level `t`.
pub fn naive_propagate(labels: &SparseMatrix, tree: &LabelTree) -> Vec<Vec<Vec<u32>>> {
    let depth = tree.depth();
    (1..=depth)
        .map(|t| {
            (0..labels.n_rows())
                .map(|i| {
                    let mut nodes: Vec<u32> = labels
                        .row(i)
                        .indices
                        .iter()
                        .map(|&l| {
                            let mut node = l as usize;
                            for s in ((t + 1)..=depth).rev() {
                                node = tree.parent(s, node);
                            }
                            node as u32
                        })
                        .collect();
                    nodes.sort_unstable();
                    nodes.dedup();
                    nodes
                })
                .collect()
        })
        .collect()
}

// ------------------------------------------------------- finite differences --

/// Normwise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nb: f64 = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Central differences of `f` at every coordinate of `params`. The step is the
/// representable `fl(x + h) - fl(x - h)`, not the nominal `2h`.
pub fn central_diff(params: &mut [f32], h: f32, mut f: impl FnMut(&[f32]) -> f64) -> Vec<f64> {
    (0..params.len())
        .map(|i| {
            let x = params[i];
            let (up, down) = (x + h, x - h);
            params[i] = up;
            let fu = f(params);
            params[i] = down;
            let fd = f(params);
            params[i] = x;
            (fu - fd) / (up as f64 - down as f64)
        })
        .collect()
}
