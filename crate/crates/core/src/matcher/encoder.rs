use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DenseMatrix, SparseMatrix, SparseRow};
use crate::error::{Error, Result};
use crate::seed;

/// Bag-of-feature-embeddings text encoder: `z = normalize(sum_j x_j T[j] + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// `D x d`, one row per sparse input feature.
    pub feature_embeddings: DenseMatrix,
    pub bias: Vec<f32>,
}

/// Gradient of a scalar loss with respect to the encoder parameters.
/// Only table rows of features present in the batch appear.
#[derive(Clone, Debug, Default)]
pub struct EncoderGrad {
    pub table: BTreeMap<u32, Vec<f64>>,
    pub bias: Vec<f64>,
}

impl EncoderParams {
    pub fn new(feature_embeddings: DenseMatrix, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != feature_embeddings.n_cols() {
            return Err(Error::Shape(format!(
                "encoder bias of length {} for width {}",
                bias.len(),
                feature_embeddings.n_cols()
            )));
        }
        if !feature_embeddings.is_finite() || bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("encoder parameters must be finite".into()));
        }
        Ok(Self { feature_embeddings, bias })
    }

    /// Table entries drawn from `N(0, 1/d)`, zero bias.
    pub fn init(n_features: usize, dim: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let normal = Normal::new(0.0f32, 1.0 / (dim as f32).sqrt()).expect("positive std");
        let values = (0..n_features * dim).map(|_| normal.sample(&mut rng)).collect();
        Self {
            feature_embeddings: DenseMatrix::new(n_features, dim, values).expect("sized buffer"),
            bias: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_embeddings.n_rows()
    }

    /// Unnormalized output `u` and its norm, accumulated in `f64`.
    fn pre_activation(&self, x: SparseRow<'_>) -> (Vec<f64>, f64) {
        let mut u: Vec<f64> = self.bias.iter().map(|&b| b as f64).collect();
        for (j, v) in x.iter() {
            for (acc, &t) in u.iter_mut().zip(self.feature_embeddings.row(j as usize)) {
                *acc += v as f64 * t as f64;
            }
        }
        let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        (u, norm)
    }

    /// Gradients through the normalization for one text: given `dL/dz`, adds
    /// `dL/dT[j] = x_j g_u` and `dL/db = g_u` with
    /// `g_u = (g - z (z . g)) / |u|`. A zero pre-activation passes `g` through.
    pub fn backward_into(&self, x: SparseRow<'_>, grad_z: &[f64], out: &mut EncoderGrad) {
        let d = self.dim();
        let (u, norm) = self.pre_activation(x);
        let g_u: Vec<f64> = if norm > 0.0 {
            let z: Vec<f64> = u.iter().map(|a| a / norm).collect();
            let zg: f64 = z.iter().zip(grad_z).map(|(a, b)| a * b).sum();
            grad_z.iter().zip(&z).map(|(g, zi)| (g - zi * zg) / norm).collect()
        } else {
            grad_z.to_vec()
        };
        if out.bias.len() != d {
            out.bias = vec![0.0; d];
        }
        for (acc, g) in out.bias.iter_mut().zip(&g_u) {
            *acc += g;
        }
        for (j, v) in x.iter() {
            let row = out.table.entry(j).or_insert_with(|| vec![0.0; d]);
            for (acc, g) in row.iter_mut().zip(&g_u) {
                *acc += v as f64 * g;
            }
        }
    }

    /// Encoder gradient for a batch of texts given `dL/dz` (`N_b x d`, row-major).
    pub fn backward(&self, texts: &SparseMatrix, grad_z: &[f64]) -> EncoderGrad {
        let d = self.dim();
        let mut out = EncoderGrad { table: BTreeMap::new(), bias: vec![0.0; d] };
        for i in 0..texts.n_rows() {
            self.backward_into(texts.row(i), &grad_z[i * d..(i + 1) * d], &mut out);
        }
        out
    }

    /// Single-writer SGD step.
    pub fn apply(&mut self, grad: &EncoderGrad, lr: f32) {
        for (&j, g) in &grad.table {
            for (w, &gi) in self.feature_embeddings.row_mut(j as usize).iter_mut().zip(g) {
                *w -= lr * gi as f32;
            }
        }
        for (b, &g) in self.bias.iter_mut().zip(&grad.bias) {
            *b -= lr * g as f32;
        }
    }
}

/// Unit-norm encoding of one text. A zero pre-activation encodes to zero.
pub fn encode_text(params: &EncoderParams, x: SparseRow<'_>) -> Vec<f32> {
    let (u, norm) = params.pre_activation(x);
    if norm > 0.0 {
        u.iter().map(|a| (a / norm) as f32).collect()
    } else {
        vec![0.0; u.len()]
    }
}

/// Encodes every row of `x` in parallel.
pub fn encode_rows(params: &EncoderParams, x: &SparseMatrix) -> Result<DenseMatrix> {
    if x.n_cols() != params.n_features() {
        return Err(Error::Shape(format!(
            "texts with {} features for an encoder over {}",
            x.n_cols(),
            params.n_features()
        )));
    }
    let d = params.dim();
    let mut values = vec![0f32; x.n_rows() * d];
    if d > 0 {
        values
            .par_chunks_mut(d)
            .enumerate()
            .for_each(|(i, out)| out.copy_from_slice(&encode_text(params, x.row(i))));
    }
    DenseMatrix::new(x.n_rows(), d, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn params() -> EncoderParams {
        let table = DenseMatrix::from_rows(2, &[vec![3.0, 4.0], vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        EncoderParams::new(table, vec![0.0, 0.0]).unwrap()
    }

    #[test]
    fn one_hot_gives_normalized_row() {
        let x = SparseMatrix::from_rows(3, vec![vec![(0, 1.0)]]).unwrap();
        let z = encode_text(&params(), x.row(0));
        assert_abs_diff_eq!(z[0], 0.6, epsilon = 1e-7);
        assert_abs_diff_eq!(z[1], 0.8, epsilon = 1e-7);
    }

    #[test]
    fn empty_text_encodes_bias() {
        let mut p = params();
        p.bias = vec![0.0, -2.0];
        let x = SparseMatrix::zeros(1, 3);
        assert_eq!(encode_text(&p, x.row(0)), vec![0.0, -1.0]);
        p.bias = vec![0.0, 0.0];
        assert_eq!(encode_text(&p, x.row(0)), vec![0.0, 0.0]);
    }

    #[test]
    fn rows_match_single_encodings() {
        let p = EncoderParams::init(5, 4, 9);
        let x = SparseMatrix::from_rows(5, vec![vec![(0, 0.5), (3, 1.0)], vec![], vec![(4, 2.0)]]).unwrap();
        let z = encode_rows(&p, &x).unwrap();
        for i in 0..3 {
            assert_eq!(z.row(i), encode_text(&p, x.row(i)).as_slice());
        }
        assert_abs_diff_eq!(crate::data::dot(z.row(0), z.row(0)), 1.0, epsilon = 1e-6);
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(EncoderParams::init(3, 4, 1), EncoderParams::init(3, 4, 1));
        assert_ne!(EncoderParams::init(3, 4, 1), EncoderParams::init(3, 4, 2));
    }
}
