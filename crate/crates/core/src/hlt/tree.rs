use std::fs;
use std::path::Path;

use log::debug;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kmeans::{balanced_kmeans_subset, ClusterPoints};
use crate::data::{load_sparse, save_sparse, DenseMatrix, SparseMatrix};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HltConfig {
    pub branching: usize,
    pub max_leaf: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f32,
}

impl Default for HltConfig {
    fn default() -> Self {
        Self {
            branching: 16,
            max_leaf: 100,
            seed: 0,
            max_iters: 20,
            tol: 1e-4,
        }
    }
}

impl HltConfig {
    pub fn validate(&self) -> Result<()> {
        if self.branching < 2 {
            return Err(Error::Config("tree branching must be at least 2".into()));
        }
        if self.max_leaf == 0 {
            return Err(Error::Config("max_leaf must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of levels including the label level: the smallest `c` with
    /// `branching^c * max_leaf >= n_labels` cluster levels, plus one.
    pub fn depth_for(&self, n_labels: usize) -> usize {
        let mut levels = 0;
        let mut capacity = self.max_leaf as u128;
        while capacity < n_labels as u128 {
            capacity *= self.branching as u128;
            levels += 1;
        }
        levels + 1
    }
}

/// Hierarchical label tree as a chain of parent-assignment matrices.
///
/// `cluster_matrix(t)` is `C^(t)` with shape `K_t x K_{t-1}` (`K_0 = 1`,
/// `K_D = L`); each row has a single one marking the node's parent.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelTree {
    branching: usize,
    assignments: Vec<SparseMatrix>,
    children: Vec<SparseMatrix>,
}

#[derive(Serialize, Deserialize)]
struct TreeManifest {
    format_version: String,
    depth: usize,
    branching: usize,
    level_sizes: Vec<usize>,
    files: Vec<String>,
}

impl LabelTree {
    /// Validates the chain: shapes compose and every node has one parent.
    pub fn from_assignments(branching: usize, assignments: Vec<SparseMatrix>) -> Result<Self> {
        if assignments.is_empty() {
            return Err(Error::Data("a label tree needs at least one level".into()));
        }
        let mut parent_count = 1;
        for (t, c) in assignments.iter().enumerate() {
            if c.n_cols() != parent_count {
                return Err(Error::Shape(format!(
                    "C^({}) has {} columns, previous level has {parent_count} nodes",
                    t + 1,
                    c.n_cols()
                )));
            }
            if let Some(i) = (0..c.n_rows()).find(|&i| c.row_nnz(i) != 1) {
                return Err(Error::Data(format!(
                    "node {i} of level {} does not have exactly one parent",
                    t + 1
                )));
            }
            if c.col_nnz().contains(&0) {
                return Err(Error::Data(format!("level {} has a childless node", t)));
            }
            parent_count = c.n_rows();
        }
        let children = assignments.iter().map(SparseMatrix::transpose).collect();
        Ok(Self {
            branching,
            assignments,
            children,
        })
    }

    /// Single-level tree: every label hangs from the root.
    pub fn flat(n_labels: usize) -> Self {
        Self::from_assignments(n_labels.max(2), vec![SparseMatrix::ones(n_labels, 1)])
            .expect("flat tree is valid")
    }

    pub fn depth(&self) -> usize {
        self.assignments.len()
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn n_labels(&self) -> usize {
        self.assignments.last().unwrap().n_rows()
    }

    /// `[K_1, ..., K_D]`.
    pub fn level_sizes(&self) -> Vec<usize> {
        self.assignments.iter().map(SparseMatrix::n_rows).collect()
    }

    pub fn level_size(&self, t: usize) -> usize {
        if t == 0 {
            1
        } else {
            self.assignments[t - 1].n_rows()
        }
    }

    /// `C^(t)` for `t` in `1..=depth`.
    pub fn cluster_matrix(&self, t: usize) -> &SparseMatrix {
        &self.assignments[t - 1]
    }

    pub fn cluster_matrices(&self) -> &[SparseMatrix] {
        &self.assignments
    }

    /// Children at level `t` of node `parent` at level `t - 1`, ascending.
    pub fn children(&self, t: usize, parent: usize) -> &[u32] {
        self.children[t - 1].row(parent).indices
    }

    /// Parent (at level `t - 1`) of node `node` at level `t`.
    pub fn parent(&self, t: usize, node: usize) -> usize {
        self.assignments[t - 1].row(node).indices[0] as usize
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for (t, c) in self.assignments.iter().enumerate() {
            let name = format!("level_{}.txt", t + 1);
            save_sparse(dir.join(&name), c)?;
            files.push(name);
        }
        let manifest = TreeManifest {
            format_version: "1".into(),
            depth: self.depth(),
            branching: self.branching,
            level_sizes: self.level_sizes(),
            files,
        };
        let path = dir.join("tree.json");
        let json = serde_json::to_string_pretty(&manifest).expect("tree manifest serializes");
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("tree.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: TreeManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        if manifest.format_version != "1" {
            return Err(Error::Data(format!(
                "unsupported tree format version {}",
                manifest.format_version
            )));
        }
        let assignments = manifest
            .files
            .iter()
            .map(|f| load_sparse(dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        let tree = Self::from_assignments(manifest.branching, assignments)?;
        if tree.level_sizes() != manifest.level_sizes {
            return Err(Error::Data("tree level sizes disagree with manifest".into()));
        }
        Ok(tree)
    }
}

/// Builds the tree top-down from row-normalized label vectors. Each cluster
/// of a level is split into `min(branching, size)` balanced children until
/// clusters hold at most `max_leaf` labels; the final level holds the labels.
/// Sibling splits run in parallel with per-node seeds, so the result does not
/// depend on thread count.
pub fn build_tree_from_points<P: ClusterPoints>(points: &P, config: &HltConfig) -> Result<LabelTree> {
    config.validate()?;
    let n_labels = points.n_points();
    if n_labels == 0 {
        return Err(Error::Data("cannot build a tree over zero labels".into()));
    }
    let depth = config.depth_for(n_labels);
    let mut clusters: Vec<Vec<usize>> = vec![(0..n_labels).collect()];
    let mut assignments = Vec::with_capacity(depth);
    for level in 1..depth {
        let splits: Vec<Vec<Vec<usize>>> = clusters
            .par_iter()
            .enumerate()
            .map(|(ci, members)| {
                let k = config.branching.min(members.len());
                let node_seed = seed::derive_indexed(
                    seed::derive_indexed(config.seed, level as u64),
                    ci as u64,
                );
                let assign =
                    balanced_kmeans_subset(points, members, k, node_seed, config.max_iters, config.tol)?;
                let mut groups = vec![Vec::new(); k];
                for (pos, &label) in members.iter().enumerate() {
                    groups[assign[pos]].push(label);
                }
                Ok(groups)
            })
            .collect::<Result<_>>()?;
        let mut next = Vec::new();
        let mut parents = Vec::new();
        for (ci, groups) in splits.into_iter().enumerate() {
            for g in groups {
                parents.push(vec![ci as u32]);
                next.push(g);
            }
        }
        assignments.push(SparseMatrix::from_label_sets(clusters.len(), &parents)?);
        debug!("tree level {level}: {} clusters", next.len());
        clusters = next;
    }
    let mut label_parent = vec![Vec::new(); n_labels];
    for (ci, members) in clusters.iter().enumerate() {
        for &l in members {
            label_parent[l] = vec![ci as u32];
        }
    }
    assignments.push(SparseMatrix::from_label_sets(clusters.len(), &label_parent)?);
    LabelTree::from_assignments(config.branching, assignments)
}

/// Normalizes the label embeddings and builds the tree.
pub fn build_tree(embeddings: &DenseMatrix, config: &HltConfig) -> Result<LabelTree> {
    build_tree_from_points(&embeddings.l2_normalize_rows(), config)
}

/// Ground truth at every level, `Y^(t) = binarize(Y^(t+1) C^(t+1))`, returned
/// as `[Y^(1), ..., Y^(D)]` with `Y^(D) = labels`.
pub fn propagate_labels(labels: &SparseMatrix, tree: &LabelTree) -> Result<Vec<SparseMatrix>> {
    if labels.n_cols() != tree.n_labels() {
        return Err(Error::Shape(format!(
            "label matrix has {} columns, tree has {} labels",
            labels.n_cols(),
            tree.n_labels()
        )));
    }
    let depth = tree.depth();
    let mut levels = vec![labels.binarize()];
    for t in (2..=depth).rev() {
        let next = levels.last().unwrap().spmm(tree.cluster_matrix(t))?.binarize();
        levels.push(next);
    }
    levels.reverse();
    Ok(levels)
}
