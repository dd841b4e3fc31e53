use serde::{Deserialize, Serialize};

use super::DenseMatrix;
use crate::error::{Error, Result};

/// Compressed sparse row matrix with `f32` values.
///
/// Column indices are strictly increasing within each row. Explicit zeros are
/// allowed; [`SparseMatrix::binarize`] drops them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<u32>,
    values: Vec<f32>,
}

/// Borrowed view of one CSR row.
#[derive(Clone, Copy, Debug)]
pub struct SparseRow<'a> {
    pub indices: &'a [u32],
    pub values: &'a [f32],
}

impl<'a> SparseRow<'a> {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f32)> + 'a {
        self.indices.iter().copied().zip(self.values.iter().copied())
    }

    pub fn dot_dense(&self, dense: &[f32]) -> f32 {
        self.iter().map(|(j, v)| v * dense[j as usize]).sum()
    }

    pub fn norm(&self) -> f32 {
        self.values.iter().map(|v| v * v).sum::<f32>().sqrt()
    }

    pub fn l1_norm(&self) -> f32 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    pub fn contains(&self, col: u32) -> bool {
        self.indices.binary_search(&col).is_ok()
    }
}

impl SparseMatrix {
    /// Builds a matrix from raw CSR arrays, checking every structural invariant.
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<u32>,
        values: Vec<f32>,
    ) -> Result<Self> {
        if row_offsets.len() != n_rows + 1 {
            return Err(Error::Shape(format!(
                "row_offsets has length {}, expected {}",
                row_offsets.len(),
                n_rows + 1
            )));
        }
        if row_offsets[0] != 0 {
            return Err(Error::Data("row_offsets[0] must be 0".into()));
        }
        if col_indices.len() != values.len() || row_offsets[n_rows] != col_indices.len() {
            return Err(Error::Shape(format!(
                "row_offsets end {} vs {} indices and {} values",
                row_offsets[n_rows],
                col_indices.len(),
                values.len()
            )));
        }
        for i in 0..n_rows {
            let (lo, hi) = (row_offsets[i], row_offsets[i + 1]);
            if lo > hi {
                return Err(Error::Data(format!("row_offsets decreases at row {i}")));
            }
            let row = &col_indices[lo..hi];
            if row.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Data(format!(
                    "column indices of row {i} are not strictly increasing"
                )));
            }
            if let Some(&last) = row.last() {
                if last as usize >= n_cols {
                    return Err(Error::Data(format!(
                        "column index {last} in row {i} out of range for {n_cols} columns"
                    )));
                }
            }
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            row_offsets: vec![0; n_rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n as u32).collect(),
            values: vec![1.0; n],
        }
    }

    /// All-ones matrix; used for fully dense candidate masks.
    pub fn ones(n_rows: usize, n_cols: usize) -> Self {
        let cols: Vec<u32> = (0..n_cols as u32).collect();
        let mut col_indices = Vec::with_capacity(n_rows * n_cols);
        for _ in 0..n_rows {
            col_indices.extend_from_slice(&cols);
        }
        Self {
            n_rows,
            n_cols,
            row_offsets: (0..=n_rows).map(|i| i * n_cols).collect(),
            values: vec![1.0; n_rows * n_cols],
            col_indices,
        }
    }

    /// Builds a matrix from per-row `(column, value)` lists. Rows are sorted;
    /// a repeated column inside a row is an error.
    pub fn from_rows<I>(n_cols: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = Vec<(u32, f32)>>,
    {
        let mut row_offsets = vec![0];
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        for (i, mut row) in rows.into_iter().enumerate() {
            row.sort_unstable_by_key(|&(j, _)| j);
            for w in row.windows(2) {
                if w[0].0 == w[1].0 {
                    return Err(Error::Data(format!(
                        "duplicate column {} in row {i}",
                        w[0].0
                    )));
                }
            }
            for (j, v) in row {
                if j as usize >= n_cols {
                    return Err(Error::Data(format!(
                        "column index {j} in row {i} out of range for {n_cols} columns"
                    )));
                }
                col_indices.push(j);
                values.push(v);
            }
            row_offsets.push(col_indices.len());
        }
        Ok(Self {
            n_rows: row_offsets.len() - 1,
            n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Binary matrix whose row `i` holds ones at the columns in `sets[i]`.
    pub fn from_label_sets(n_cols: usize, sets: &[Vec<u32>]) -> Result<Self> {
        Self::from_rows(
            n_cols,
            sets.iter().map(|s| {
                let mut s = s.clone();
                s.sort_unstable();
                s.dedup();
                s.into_iter().map(|j| (j, 1.0)).collect()
            }),
        )
    }

    pub fn from_dense(dense: &DenseMatrix) -> Self {
        let mut row_offsets = vec![0];
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        for i in 0..dense.n_rows() {
            for (j, &v) in dense.row(i).iter().enumerate() {
                if v != 0.0 {
                    col_indices.push(j as u32);
                    values.push(v);
                }
            }
            row_offsets.push(col_indices.len());
        }
        Self {
            n_rows: dense.n_rows(),
            n_cols: dense.n_cols(),
            row_offsets,
            col_indices,
            values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.col_indices.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[u32] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> SparseRow<'_> {
        let (lo, hi) = (self.row_offsets[i], self.row_offsets[i + 1]);
        SparseRow {
            indices: &self.col_indices[lo..hi],
            values: &self.values[lo..hi],
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = SparseRow<'_>> + '_ {
        (0..self.n_rows).map(move |i| self.row(i))
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.row_offsets[i + 1] - self.row_offsets[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        let row = self.row(i);
        match row.indices.binary_search(&(j as u32)) {
            Ok(pos) => row.values[pos],
            Err(_) => 0.0,
        }
    }

    /// Number of stored entries in each column.
    pub fn col_nnz(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_cols];
        for &j in &self.col_indices {
            counts[j as usize] += 1;
        }
        counts
    }

    pub fn transpose(&self) -> SparseMatrix {
        let counts = self.col_nnz();
        let mut row_offsets = Vec::with_capacity(self.n_cols + 1);
        row_offsets.push(0);
        for c in &counts {
            row_offsets.push(row_offsets.last().unwrap() + c);
        }
        let mut cursor = row_offsets[..self.n_cols].to_vec();
        let mut col_indices = vec![0u32; self.nnz()];
        let mut values = vec![0f32; self.nnz()];
        for i in 0..self.n_rows {
            for (j, v) in self.row(i).iter() {
                let pos = cursor[j as usize];
                col_indices[pos] = i as u32;
                values[pos] = v;
                cursor[j as usize] += 1;
            }
        }
        SparseMatrix {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            row_offsets,
            col_indices,
            values,
        }
    }

    /// Exact sparse product `self * rhs` (Gustavson's row-by-row scheme).
    pub fn spmm(&self, rhs: &SparseMatrix) -> Result<SparseMatrix> {
        if self.n_cols != rhs.n_rows {
            return Err(Error::Shape(format!(
                "spmm: {}x{} times {}x{}",
                self.n_rows, self.n_cols, rhs.n_rows, rhs.n_cols
            )));
        }
        let mut acc = vec![0f32; rhs.n_cols];
        let mut seen = vec![false; rhs.n_cols];
        let mut touched: Vec<u32> = Vec::new();
        let mut row_offsets = vec![0];
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        for i in 0..self.n_rows {
            for (k, a) in self.row(i).iter() {
                for (j, b) in rhs.row(k as usize).iter() {
                    let ju = j as usize;
                    if !seen[ju] {
                        seen[ju] = true;
                        touched.push(j);
                    }
                    acc[ju] += a * b;
                }
            }
            touched.sort_unstable();
            for &j in &touched {
                col_indices.push(j);
                values.push(acc[j as usize]);
                acc[j as usize] = 0.0;
                seen[j as usize] = false;
            }
            touched.clear();
            row_offsets.push(col_indices.len());
        }
        Ok(SparseMatrix {
            n_rows: self.n_rows,
            n_cols: rhs.n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Keeps entries with value > 0 and sets them to 1.
    pub fn binarize(&self) -> SparseMatrix {
        let mut row_offsets = vec![0];
        let mut col_indices = Vec::new();
        for row in self.rows() {
            col_indices.extend(row.iter().filter(|&(_, v)| v > 0.0).map(|(j, _)| j));
            row_offsets.push(col_indices.len());
        }
        SparseMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            row_offsets,
            values: vec![1.0; col_indices.len()],
            col_indices,
        }
    }

    /// Binary union of two sparsity patterns of equal shape.
    pub fn union_pattern(&self, other: &SparseMatrix) -> Result<SparseMatrix> {
        if self.n_rows != other.n_rows || self.n_cols != other.n_cols {
            return Err(Error::Shape(format!(
                "union of {}x{} and {}x{}",
                self.n_rows, self.n_cols, other.n_rows, other.n_cols
            )));
        }
        let mut row_offsets = vec![0];
        let mut col_indices = Vec::with_capacity(self.nnz().max(other.nnz()));
        for i in 0..self.n_rows {
            let (a, b) = (self.row(i).indices, other.row(i).indices);
            let (mut p, mut q) = (0, 0);
            while p < a.len() || q < b.len() {
                let next = match (a.get(p), b.get(q)) {
                    (Some(&x), Some(&y)) if x == y => {
                        p += 1;
                        q += 1;
                        x
                    }
                    (Some(&x), Some(&y)) if x < y => {
                        p += 1;
                        x
                    }
                    (Some(&x), None) => {
                        p += 1;
                        x
                    }
                    (_, Some(&y)) => {
                        q += 1;
                        y
                    }
                    (None, None) => unreachable!(),
                };
                col_indices.push(next);
            }
            row_offsets.push(col_indices.len());
        }
        Ok(SparseMatrix {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            row_offsets,
            values: vec![1.0; col_indices.len()],
            col_indices,
        })
    }

    pub fn select_rows(&self, rows: &[usize]) -> SparseMatrix {
        let mut row_offsets = vec![0];
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        for &i in rows {
            let row = self.row(i);
            col_indices.extend_from_slice(row.indices);
            values.extend_from_slice(row.values);
            row_offsets.push(col_indices.len());
        }
        SparseMatrix {
            n_rows: rows.len(),
            n_cols: self.n_cols,
            row_offsets,
            col_indices,
            values,
        }
    }

    /// Scales each nonzero row to unit Euclidean norm.
    pub fn l2_normalize_rows(&self) -> SparseMatrix {
        let mut out = self.clone();
        for i in 0..self.n_rows {
            let (lo, hi) = (self.row_offsets[i], self.row_offsets[i + 1]);
            let norm = self.values[lo..hi]
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            if norm > 0.0 {
                for v in &mut out.values[lo..hi] {
                    *v = (*v as f64 / norm) as f32;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut dense = DenseMatrix::zeros(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            let out = dense.row_mut(i);
            for (j, v) in self.row(i).iter() {
                out[j as usize] = v;
            }
        }
        dense
    }

    /// True when every stored value is exactly 1.
    pub fn is_binary(&self) -> bool {
        self.values.iter().all(|&v| v == 1.0)
    }
}
