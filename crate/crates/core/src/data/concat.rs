use serde::{Deserialize, Serialize};

use super::{DenseMatrix, SparseMatrix};
use crate::error::{Error, Result};

/// Where a block of the concatenated feature space comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// The sparse TF-IDF input features.
    Sparse,
    /// Dense text features produced by the trained matcher encoder.
    Matcher,
    /// Externally computed dense embeddings read from a file.
    Static,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub offset: usize,
    pub width: usize,
    pub weight: f32,
}

/// Column layout of a concatenated feature matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecipe {
    pub blocks: Vec<BlockSpec>,
}

impl FeatureRecipe {
    pub fn total_width(&self) -> usize {
        self.blocks.iter().map(|b| b.width).sum()
    }

    pub fn kinds(&self) -> Vec<BlockKind> {
        self.blocks.iter().map(|b| b.kind).collect()
    }
}

/// Concatenates `[sparse | dense_1 | ... | dense_k]` column-wise.
///
/// Every block is l2-normalized per row and then scaled by its weight, so
/// `block_weights` has `1 + dense_blocks.len()` entries, the first one for the
/// sparse block. Exact zeros in dense blocks are not stored.
pub fn concat_features(
    sparse: &SparseMatrix,
    dense_blocks: &[(BlockKind, &DenseMatrix)],
    block_weights: &[f32],
) -> Result<(SparseMatrix, FeatureRecipe)> {
    if block_weights.len() != dense_blocks.len() + 1 {
        return Err(Error::Config(format!(
            "{} block weights for {} blocks",
            block_weights.len(),
            dense_blocks.len() + 1
        )));
    }
    if let Some(w) = block_weights.iter().find(|w| !w.is_finite() || **w <= 0.0) {
        return Err(Error::Config(format!("block weight {w} must be positive")));
    }
    let n = sparse.n_rows();
    for (kind, block) in dense_blocks {
        if block.n_rows() != n {
            return Err(Error::Shape(format!(
                "{kind:?} block has {} rows, sparse features have {n}",
                block.n_rows()
            )));
        }
    }

    let mut blocks = vec![BlockSpec {
        kind: BlockKind::Sparse,
        offset: 0,
        width: sparse.n_cols(),
        weight: block_weights[0],
    }];
    let mut offset = sparse.n_cols();
    for ((kind, block), &weight) in dense_blocks.iter().zip(&block_weights[1..]) {
        blocks.push(BlockSpec {
            kind: *kind,
            offset,
            width: block.n_cols(),
            weight,
        });
        offset += block.n_cols();
    }

    let sparse = sparse.l2_normalize_rows();
    let dense: Vec<DenseMatrix> = dense_blocks
        .iter()
        .map(|(_, b)| b.l2_normalize_rows())
        .collect();

    let mut row_offsets = Vec::with_capacity(n + 1);
    row_offsets.push(0);
    let mut col_indices = Vec::new();
    let mut values = Vec::new();
    for i in 0..n {
        for (j, v) in sparse.row(i).iter() {
            col_indices.push(j);
            values.push(v * blocks[0].weight);
        }
        for (spec, block) in blocks[1..].iter().zip(&dense) {
            for (j, &v) in block.row(i).iter().enumerate() {
                if v != 0.0 {
                    col_indices.push((spec.offset + j) as u32);
                    values.push(v * spec.weight);
                }
            }
        }
        row_offsets.push(col_indices.len());
    }
    let out = SparseMatrix::new(n, offset, row_offsets, col_indices, values)?;
    Ok((out, FeatureRecipe { blocks }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dot(a: &SparseMatrix, i: usize, b: &SparseMatrix, k: usize) -> f64 {
        let dense = b.to_dense();
        a.row(i)
            .iter()
            .map(|(j, v)| v as f64 * dense.row(k)[j as usize] as f64)
            .sum()
    }

    #[test]
    fn appends_dense_block_after_sparse_columns() {
        let x = SparseMatrix::from_rows(3, vec![vec![(0, 3.0), (2, 4.0)], vec![(1, 1.0)]]).unwrap();
        let d = DenseMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let (out, recipe) = concat_features(&x, &[(BlockKind::Matcher, &d)], &[1.0, 1.0]).unwrap();
        assert_eq!((out.n_rows(), out.n_cols()), (2, 5));
        assert_eq!(recipe.blocks[1].offset, 3);
        assert_eq!(recipe.total_width(), 5);
        assert_eq!(out.row(0).indices, &[0, 2, 3]);
        assert_eq!(out.row(0).values, &[0.6, 0.8, 1.0]);
        assert_eq!(out.row(1).indices, &[1, 4]);
    }

    #[test]
    fn tiny_weight_makes_block_negligible() {
        let x = SparseMatrix::from_rows(2, vec![vec![(0, 1.0)], vec![(0, 1.0)]]).unwrap();
        let d = DenseMatrix::new(2, 1, vec![1.0, 1.0]).unwrap();
        let (out, _) = concat_features(&x, &[(BlockKind::Static, &d)], &[1.0, 1e-6]).unwrap();
        assert!((dot(&out, 0, &out, 1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn three_blocks_have_combined_width() {
        let x = SparseMatrix::zeros(4, 10);
        let a = DenseMatrix::zeros(4, 3);
        let b = DenseMatrix::zeros(4, 5);
        let (out, recipe) = concat_features(
            &x,
            &[(BlockKind::Matcher, &a), (BlockKind::Static, &b)],
            &[1.0, 1.0, 1.0],
        )
        .unwrap();
        assert_eq!(out.n_cols(), 18);
        assert_eq!(
            recipe.kinds(),
            vec![BlockKind::Sparse, BlockKind::Matcher, BlockKind::Static]
        );
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let x = SparseMatrix::zeros(2, 3);
        let d = DenseMatrix::zeros(3, 2);
        assert!(concat_features(&x, &[(BlockKind::Matcher, &d)], &[1.0, 1.0]).is_err());
        let d = DenseMatrix::zeros(2, 2);
        assert!(concat_features(&x, &[(BlockKind::Matcher, &d)], &[1.0]).is_err());
        assert!(concat_features(&x, &[(BlockKind::Matcher, &d)], &[1.0, 0.0]).is_err());
    }
}
