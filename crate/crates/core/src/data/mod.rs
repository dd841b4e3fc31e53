//! Matrix kernels, dataset representation, and file formats.

mod concat;
mod dense;
pub mod io;
mod sparse;

pub use concat::{concat_features, BlockKind, BlockSpec, FeatureRecipe};
pub use dense::DenseMatrix;
pub(crate) use dense::{dot, normalize_in_place};
#[cfg(test)]
pub(crate) use dense::dot_f64;
pub use io::{load_dense, load_sparse, load_xmc_text, save_dense, save_sparse, save_xmc_text};
pub use sparse::{SparseMatrix, SparseRow};

use std::path::Path;

use crate::error::{Error, Result};

/// A labelled training or test set.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub features_sparse: SparseMatrix,
    pub features_dense: Option<DenseMatrix>,
    pub labels: SparseMatrix,
}

impl Dataset {
    /// Validates row counts, binary labels, and that no sample is unlabelled.
    pub fn new(
        features_sparse: SparseMatrix,
        features_dense: Option<DenseMatrix>,
        labels: SparseMatrix,
    ) -> Result<Self> {
        let n = features_sparse.n_rows();
        if labels.n_rows() != n {
            return Err(Error::Shape(format!(
                "{n} feature rows vs {} label rows",
                labels.n_rows()
            )));
        }
        if let Some(d) = &features_dense {
            if d.n_rows() != n {
                return Err(Error::Shape(format!(
                    "{n} feature rows vs {} dense rows",
                    d.n_rows()
                )));
            }
        }
        if !labels.is_binary() {
            return Err(Error::Data("label matrix must be binary".into()));
        }
        if let Some(i) = (0..n).find(|&i| labels.row_nnz(i) == 0) {
            return Err(Error::Data(format!("sample {i} has no positive label")));
        }
        Ok(Self {
            features_sparse,
            features_dense,
            labels,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (x, y) = load_xmc_text(path)?;
        Self::new(x, None, y)
    }

    pub fn with_dense(mut self, dense: DenseMatrix) -> Result<Self> {
        if dense.n_rows() != self.len() {
            return Err(Error::Shape(format!(
                "{} samples vs {} dense rows",
                self.len(),
                dense.n_rows()
            )));
        }
        self.features_dense = Some(dense);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.features_sparse.n_rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.features_sparse.n_cols()
    }

    pub fn n_labels(&self) -> usize {
        self.labels.n_cols()
    }
}
