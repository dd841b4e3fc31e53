//! Finite-difference checks of the analytic gradients. Each `*_point` draws
//! one random point and returns the normwise relative error of the analytic
//! gradient against central differences.

use rand::seq::index::sample;
use rand::Rng;

use super::{central_diff, random_sparse, rel_err, rng, unit_rows};
use xmatch::data::SparseMatrix;
use xmatch::label2vec::{sgns_gradient, sgns_loss};
use xmatch::matcher::{
    label_text_loss, label_text_loss_grad, matching_loss, matching_loss_grad, text_label_loss, text_label_loss_grad,
    EncoderParams, LabelEmbeddingLayer, LossGrad, MatchBatch,
};

/// Nominal finite-difference step.
pub const STEP: f32 = 1e-4;
/// Error denominator floor for near-zero gradients.
const FLOOR: f64 = 1e-10;
pub const TAU: f64 = 0.05;

pub fn sgns_point(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (d, n_neg) = (8, 5);
    let mut params: Vec<f32> = (0..(2 + n_neg) * d).map(|_| r.random_range(-0.6f32..0.6)).collect();
    let eval = |p: &[f32]| {
        let negs: Vec<&[f32]> = p[2 * d..].chunks(d).collect();
        sgns_loss(&p[..d], &p[d..2 * d], &negs)
    };
    let negs: Vec<&[f32]> = params[2 * d..].chunks(d).collect();
    let g = sgns_gradient(&params[..d], &params[d..2 * d], &negs);
    let mut analytic = g.target.clone();
    analytic.extend(&g.context);
    g.negatives.iter().for_each(|n| analytic.extend(n));
    let numeric = central_diff(&mut params, STEP, eval);
    rel_err(&analytic, &numeric, FLOOR)
}

/// Random batch over a layer of `k` labels: 1-3 positives and 0-3 disjoint
/// hard negatives per text.
pub fn random_batch(seed: u64, n: usize, k: usize, d: usize) -> (MatchBatch, LabelEmbeddingLayer) {
    let mut r = rng(seed);
    let z = unit_rows(&mut r, n, d);
    let embeddings = unit_rows(&mut r, k, d);
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for _ in 0..n {
        let n_pos = r.random_range(1..=3);
        let n_neg = r.random_range(0..=3);
        let mut picks: Vec<u32> = sample(&mut r, k, n_pos + n_neg).into_iter().map(|i| i as u32).collect();
        let neg = picks.split_off(n_pos);
        positives.push(picks);
        negatives.push(neg);
    }
    let batch = MatchBatch::new((0..n).collect(), z, positives, negatives).unwrap();
    (batch, LabelEmbeddingLayer { level: 1, embeddings })
}

fn flatten(g: &LossGrad, k: usize, d: usize) -> Vec<f64> {
    let mut out = g.grad_z.clone();
    for l in 0..k as u32 {
        match g.grad_e.get(&l) {
            Some(row) => out.extend(row),
            None => out.extend(std::iter::repeat_n(0.0, d)),
        }
    }
    out
}

/// Checks `loss` against `grad` in both the texts `z` and the label table `E`.
fn loss_point(
    seed: u64,
    loss: impl Fn(&MatchBatch, &LabelEmbeddingLayer) -> f64,
    grad: impl Fn(&MatchBatch, &LabelEmbeddingLayer) -> LossGrad,
) -> f64 {
    let (n, k, d) = (5, 9, 6);
    let (mut batch, mut layer) = random_batch(seed, n, k, d);
    let analytic = flatten(&grad(&batch, &layer), k, d);
    let mut params: Vec<f32> = batch.z.values().to_vec();
    params.extend(layer.embeddings.values());
    let split = n * d;
    let numeric = central_diff(&mut params, STEP, |p| {
        batch.z.values_mut().copy_from_slice(&p[..split]);
        layer.embeddings.values_mut().copy_from_slice(&p[split..]);
        loss(&batch, &layer)
    });
    rel_err(&analytic, &numeric, FLOOR)
}

pub fn text_label_point(seed: u64) -> f64 {
    loss_point(
        seed,
        |b, l| text_label_loss(b, l, TAU).unwrap(),
        |b, l| text_label_loss_grad(b, l, TAU).unwrap(),
    )
}

pub fn label_text_point(seed: u64) -> f64 {
    loss_point(
        seed,
        |b, l| label_text_loss(b, l, TAU).unwrap(),
        |b, l| label_text_loss_grad(b, l, TAU).unwrap(),
    )
}

pub fn matching_point(seed: u64) -> f64 {
    let lambda = rng(seed ^ 0x5eed).random_range(0.05..0.95);
    loss_point(
        seed,
        |b, l| matching_loss(b, l, lambda, TAU).unwrap(),
        |b, l| matching_loss_grad(b, l, lambda, TAU).unwrap(),
    )
}

/// Independent `f64` encoder: `normalize(sum_j x_j T[j] + b)`.
fn encode64(table: &[f32], bias: &[f32], x: &SparseMatrix, d: usize) -> Vec<Vec<f64>> {
    x.rows()
        .map(|row| {
            let mut u: Vec<f64> = bias.iter().map(|&b| b as f64).collect();
            for (j, v) in row.iter() {
                for c in 0..d {
                    u[c] += v as f64 * table[j as usize * d + c] as f64;
                }
            }
            let norm = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            u.iter().map(|a| a / norm).collect()
        })
        .collect()
}

/// Encoder chain rule through the matching loss: the upstream gradient is the
/// loss gradient at the encoded batch, and the checked functional is
/// `sum_i g_i . z_i(T, b)`.
pub fn encoder_point(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n_feat, n, k, d) = (10, 5, 9, 6);
    let mut params = EncoderParams::init(n_feat, d, seed);
    for b in params.bias.iter_mut() {
        *b = r.random_range(-0.3..0.3);
    }
    let mut x = random_sparse(&mut r, n, n_feat, 0.4);
    if (0..n).any(|i| x.row_nnz(i) == 0) {
        x = random_sparse(&mut r, n, n_feat, 1.0);
    }
    let z = xmatch::matcher::encode_rows(&params, &x).unwrap();
    let (mut batch, layer) = random_batch(seed, n, k, d);
    batch.z = z;
    let upstream = matching_loss_grad(&batch, &layer, 0.5, TAU).unwrap().grad_z;

    let grad = params.backward(&x, &upstream);
    let mut analytic = Vec::with_capacity(n_feat * d + d);
    for j in 0..n_feat as u32 {
        match grad.table.get(&j) {
            Some(row) => analytic.extend(row),
            None => analytic.extend(std::iter::repeat_n(0.0, d)),
        }
    }
    analytic.extend(&grad.bias);

    let mut flat: Vec<f32> = params.feature_embeddings.values().to_vec();
    flat.extend(&params.bias);
    let split = n_feat * d;
    let numeric = central_diff(&mut flat, STEP, |p| {
        let z = encode64(&p[..split], &p[split..], &x, d);
        z.iter()
            .enumerate()
            .map(|(i, zi)| zi.iter().zip(&upstream[i * d..(i + 1) * d]).map(|(a, g)| a * g).sum::<f64>())
            .sum()
    });
    rel_err(&analytic, &numeric, FLOOR)
}
