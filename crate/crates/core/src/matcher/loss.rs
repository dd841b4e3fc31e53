//! Text-label and label-text contrastive losses over a mini-batch.
//!
//! Both directions are multi-positive softmax cross-entropies over dot-product
//! logits scaled by `1/tau`:
//!
//! * text-label: each text contrasts its positive labels against its positive
//!   and hard-negative labels;
//! * label-text: each positive label of the batch contrasts its positive texts
//!   against every text in the batch.
//!
//! Losses and gradients are accumulated in `f64`.

use std::collections::BTreeMap;

use super::LabelEmbeddingLayer;
use crate::data::DenseMatrix;
use crate::error::{Error, Result};

/// One mini-batch with its encoded texts and label structure.
#[derive(Clone, Debug)]
pub struct MatchBatch {
    /// Row ids of the batch texts in the training set.
    pub text_ids: Vec<usize>,
    /// Encoded texts, one row per batch position.
    pub z: DenseMatrix,
    /// Positive labels of each text at the current level.
    pub positives: Vec<Vec<u32>>,
    /// Hard negative labels of each text; disjoint from its positives.
    pub hard_negatives: Vec<Vec<u32>>,
    /// Distinct positive labels of the whole batch, ascending.
    pub batch_labels: Vec<u32>,
    /// Batch positions of the texts positive for each entry of `batch_labels`.
    pub label_texts: Vec<Vec<usize>>,
}

impl MatchBatch {
    pub fn new(
        text_ids: Vec<usize>,
        z: DenseMatrix,
        positives: Vec<Vec<u32>>,
        hard_negatives: Vec<Vec<u32>>,
    ) -> Result<Self> {
        let n = z.n_rows();
        if text_ids.len() != n || positives.len() != n || hard_negatives.len() != n {
            return Err(Error::Shape(format!(
                "batch of {n} encoded texts with {} ids, {} positive lists, {} negative lists",
                text_ids.len(),
                positives.len(),
                hard_negatives.len()
            )));
        }
        let mut by_label: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, (pos, neg)) in positives.iter().zip(&hard_negatives).enumerate() {
            if pos.is_empty() {
                return Err(Error::Data(format!("batch text {i} has no positive label")));
            }
            if let Some(l) = neg.iter().find(|l| pos.contains(l)) {
                return Err(Error::Data(format!(
                    "label {l} is both positive and hard negative for batch text {i}"
                )));
            }
            for &l in pos {
                let texts = by_label.entry(l).or_default();
                if texts.last() != Some(&i) {
                    texts.push(i);
                }
            }
        }
        let (batch_labels, label_texts) = by_label.into_iter().unzip();
        Ok(Self {
            text_ids,
            z,
            positives,
            hard_negatives,
            batch_labels,
            label_texts,
        })
    }

    pub fn len(&self) -> usize {
        self.z.n_rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss value with gradients for the encoded texts and the touched label rows.
#[derive(Clone, Debug, Default)]
pub struct LossGrad {
    pub loss: f64,
    /// `N_b x d`, row-major.
    pub grad_z: Vec<f64>,
    pub grad_e: BTreeMap<u32, Vec<f64>>,
}

impl LossGrad {
    fn zeros(n: usize, d: usize) -> Self {
        Self {
            loss: 0.0,
            grad_z: vec![0.0; n * d],
            grad_e: BTreeMap::new(),
        }
    }

    /// `a * self + b * other`, used to mix the two directions.
    fn combine(mut self, a: f64, other: LossGrad, b: f64) -> LossGrad {
        self.loss = a * self.loss + b * other.loss;
        for (x, y) in self.grad_z.iter_mut().zip(&other.grad_z) {
            *x = a * *x + b * y;
        }
        for g in self.grad_e.values_mut() {
            g.iter_mut().for_each(|x| *x *= a);
        }
        for (l, g) in other.grad_e {
            let acc = self.grad_e.entry(l).or_insert_with(|| vec![0.0; g.len()]);
            for (x, y) in acc.iter_mut().zip(&g) {
                *x += b * y;
            }
        }
        self
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Softmax probabilities and log-sum-exp of `logits`, shifted by the max.
fn softmax(logits: &[f64], probs: &mut Vec<f64>) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    probs.clear();
    probs.extend(logits.iter().map(|&s| (s - max).exp()));
    let sum: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= sum);
    max + sum.ln()
}

fn check_dims(batch: &MatchBatch, layer: &LabelEmbeddingLayer, tau: f64) -> Result<()> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if batch.z.n_cols() != layer.embeddings.n_cols() {
        return Err(Error::Shape(format!(
            "text width {} vs label embedding width {}",
            batch.z.n_cols(),
            layer.embeddings.n_cols()
        )));
    }
    let k = layer.embeddings.n_rows() as u32;
    let bad = batch
        .positives
        .iter()
        .chain(&batch.hard_negatives)
        .flatten()
        .find(|&&l| l >= k);
    if let Some(l) = bad {
        return Err(Error::Shape(format!("label {l} outside a layer of {k} labels")));
    }
    Ok(())
}

fn text_label(batch: &MatchBatch, layer: &LabelEmbeddingLayer, tau: f64, with_grad: bool) -> Result<LossGrad> {
    check_dims(batch, layer, tau)?;
    let (n, d) = (batch.len(), batch.z.n_cols());
    let mut out = LossGrad::zeros(if with_grad { n } else { 0 }, d);
    if n == 0 {
        return Ok(out);
    }
    let e = &layer.embeddings;
    let mut logits = Vec::new();
    let mut probs = Vec::new();
    let scale = 1.0 / n as f64;
    for i in 0..n {
        let z = batch.z.row(i);
        let pos = &batch.positives[i];
        let cands: Vec<u32> = pos.iter().chain(&batch.hard_negatives[i]).copied().collect();
        logits.clear();
        logits.extend(cands.iter().map(|&a| dot(z, e.row(a as usize)) / tau));
        let lse = softmax(&logits, &mut probs);
        let inv_p = 1.0 / pos.len() as f64;
        let mean_pos: f64 = logits[..pos.len()].iter().sum::<f64>() * inv_p;
        out.loss += scale * (lse - mean_pos);
        if !with_grad {
            continue;
        }
        for (slot, &a) in cands.iter().enumerate() {
            let g = probs[slot] - if slot < pos.len() { inv_p } else { 0.0 };
            let coef = scale * g / tau;
            let ea = e.row(a as usize);
            let gz = &mut out.grad_z[i * d..(i + 1) * d];
            for (acc, &v) in gz.iter_mut().zip(ea) {
                *acc += coef * v as f64;
            }
            let ge = out.grad_e.entry(a).or_insert_with(|| vec![0.0; d]);
            for (acc, &v) in ge.iter_mut().zip(z) {
                *acc += coef * v as f64;
            }
        }
    }
    Ok(out)
}

fn label_text(batch: &MatchBatch, layer: &LabelEmbeddingLayer, tau: f64, with_grad: bool) -> Result<LossGrad> {
    check_dims(batch, layer, tau)?;
    let (n, d) = (batch.len(), batch.z.n_cols());
    let mut out = LossGrad::zeros(if with_grad { n } else { 0 }, d);
    let m = batch.batch_labels.len();
    if m == 0 {
        return Ok(out);
    }
    let e = &layer.embeddings;
    let mut logits = vec![0.0; n];
    let mut probs = Vec::new();
    let scale = 1.0 / m as f64;
    for (&label, texts) in batch.batch_labels.iter().zip(&batch.label_texts) {
        let el = e.row(label as usize);
        for (a, s) in logits.iter_mut().enumerate() {
            *s = dot(el, batch.z.row(a)) / tau;
        }
        let lse = softmax(&logits, &mut probs);
        let inv_p = 1.0 / texts.len() as f64;
        let mean_pos: f64 = texts.iter().map(|&p| logits[p]).sum::<f64>() * inv_p;
        out.loss += scale * (lse - mean_pos);
        if !with_grad {
            continue;
        }
        let mut g: Vec<f64> = probs.clone();
        for &p in texts {
            g[p] -= inv_p;
        }
        let ge = out.grad_e.entry(label).or_insert_with(|| vec![0.0; d]);
        for (a, &ga) in g.iter().enumerate() {
            let coef = scale * ga / tau;
            let za = batch.z.row(a);
            for (acc, &v) in ge.iter_mut().zip(za) {
                *acc += coef * v as f64;
            }
            for (acc, &v) in out.grad_z[a * d..(a + 1) * d].iter_mut().zip(el) {
                *acc += coef * v as f64;
            }
        }
    }
    Ok(out)
}

/// Text-label alignment loss.
pub fn text_label_loss(batch: &MatchBatch, layer: &LabelEmbeddingLayer, tau: f64) -> Result<f64> {
    Ok(text_label(batch, layer, tau, false)?.loss)
}

pub fn text_label_loss_grad(batch: &MatchBatch, layer: &LabelEmbeddingLayer, tau: f64) -> Result<LossGrad> {
    text_label(batch, layer, tau, true)
}

/// Label-text alignment loss; the denominator runs over the whole batch.
pub fn label_text_loss(batch: &MatchBatch, layer: &LabelEmbeddingLayer, tau: f64) -> Result<f64> {
    Ok(label_text(batch, layer, tau, false)?.loss)
}

pub fn label_text_loss_grad(batch: &MatchBatch, layer: &LabelEmbeddingLayer, tau: f64) -> Result<LossGrad> {
    label_text(batch, layer, tau, true)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// `lambda * L_tl + (1 - lambda) * L_lt`. The endpoints evaluate a single term.
pub fn matching_loss(batch: &MatchBatch, layer: &LabelEmbeddingLayer, lambda: f64, tau: f64) -> Result<f64> {
    check_lambda(lambda)?;
    if lambda == 1.0 {
        return text_label_loss(batch, layer, tau);
    }
    if lambda == 0.0 {
        return label_text_loss(batch, layer, tau);
    }
    Ok(lambda * text_label_loss(batch, layer, tau)? + (1.0 - lambda) * label_text_loss(batch, layer, tau)?)
}

pub fn matching_loss_grad(
    batch: &MatchBatch,
    layer: &LabelEmbeddingLayer,
    lambda: f64,
    tau: f64,
) -> Result<LossGrad> {
    check_lambda(lambda)?;
    if lambda == 1.0 {
        return text_label_loss_grad(batch, layer, tau);
    }
    if lambda == 0.0 {
        return label_text_loss_grad(batch, layer, tau);
    }
    let tl = text_label_loss_grad(batch, layer, tau)?;
    let lt = label_text_loss_grad(batch, layer, tau)?;
    Ok(tl.combine(lambda, lt, 1.0 - lambda))
}
