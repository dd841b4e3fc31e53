//! Skip-gram with negative sampling over label co-occurrence sets.
//!
//! Every sample's positive labels form an unordered "sentence". Because any two
//! labels of a sample are related regardless of position, the context window
//! spans the whole sample: a sample with `m` distinct labels yields all
//! `m(m-1)` ordered (target, context) pairs. No frequency subsampling is
//! applied and every label stays in the vocabulary.

use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};

use log::debug;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DenseMatrix, SparseMatrix};
use crate::error::{Error, Result};
use crate::seed;

/// Label sets, one per training sample.
#[derive(Clone, Debug)]
pub struct LabelCorpus {
    sequences: Vec<Vec<u32>>,
    n_labels: usize,
    counts: Vec<u64>,
}

impl LabelCorpus {
    /// Duplicate ids inside a sequence are collapsed.
    pub fn new(sequences: Vec<Vec<u32>>, n_labels: usize) -> Result<Self> {
        let mut counts = vec![0u64; n_labels];
        let mut out = Vec::with_capacity(sequences.len());
        for (i, mut seq) in sequences.into_iter().enumerate() {
            if seq.is_empty() {
                return Err(Error::Data(format!("label sequence {i} is empty")));
            }
            seq.sort_unstable();
            seq.dedup();
            if let Some(&bad) = seq.iter().find(|&&l| l as usize >= n_labels) {
                return Err(Error::Data(format!(
                    "label {bad} in sequence {i} out of range for {n_labels} labels"
                )));
            }
            for &l in &seq {
                counts[l as usize] += 1;
            }
            out.push(seq);
        }
        Ok(Self {
            sequences: out,
            n_labels,
            counts,
        })
    }

    pub fn from_label_matrix(labels: &SparseMatrix) -> Result<Self> {
        Self::new(
            labels.rows().map(|r| r.indices.to_vec()).collect(),
            labels.n_cols(),
        )
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Largest label set; this is the effective window size.
    pub fn max_sequence_len(&self) -> usize {
        self.sequences.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Number of ordered pairs emitted per epoch.
    pub fn n_pairs(&self) -> usize {
        self.sequences
            .iter()
            .map(|s| s.len() * (s.len().saturating_sub(1)))
            .sum()
    }
}

/// All ordered (target, context) pairs, sample by sample, in a fixed order.
pub fn generate_pairs(corpus: &LabelCorpus) -> impl Iterator<Item = (u32, u32)> + '_ {
    corpus.sequences.iter().flat_map(|seq| {
        seq.iter().flat_map(move |&t| {
            seq.iter()
                .filter(move |&&c| c != t)
                .map(move |&c| (t, c))
        })
    })
}

/// The pairs of one epoch, shuffled from `(seed, epoch)`.
pub fn epoch_pairs(corpus: &LabelCorpus, seed: u64, epoch: usize) -> Vec<(u32, u32)> {
    let mut pairs: Vec<(u32, u32)> = generate_pairs(corpus).collect();
    let mut rng = seed::rng(seed::derive_indexed(seed, epoch as u64));
    pairs.shuffle(&mut rng);
    pairs
}

/// Negative-label distribution `P(l) ∝ count_l ^ exponent`.
#[derive(Clone, Debug)]
pub struct NegativeTable {
    probabilities: Vec<f64>,
    index: WeightedIndex<f64>,
}

impl NegativeTable {
    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        self.index.sample(rng) as u32
    }
}

/// Builds the negative sampling distribution. Negative exponents favour rare
/// labels and therefore require every count to be at least one.
pub fn build_negative_table(counts: &[u64], ns_exponent: f64) -> Result<NegativeTable> {
    if !ns_exponent.is_finite() {
        return Err(Error::Config(format!(
            "negative sampling exponent {ns_exponent} is not finite"
        )));
    }
    if ns_exponent < 0.0 {
        if let Some(l) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Data(format!(
                "label {l} has zero count; cannot raise to negative exponent {ns_exponent}"
            )));
        }
    }
    let weights: Vec<f64> = counts
        .iter()
        .map(|&c| if c == 0 && ns_exponent != 0.0 { 0.0 } else { (c as f64).powf(ns_exponent) })
        .collect();
    let total: f64 = weights.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(Error::Data("negative sampling distribution is empty".into()));
    }
    let probabilities: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let index = WeightedIndex::new(&weights)
        .map_err(|e| Error::Data(format!("negative sampling distribution: {e}")))?;
    Ok(NegativeTable {
        probabilities,
        index,
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    -((-x).max(0.0) + (-x.abs()).exp().ln_1p())
}

fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// `-log σ(w_t·w_c) - Σ_k log σ(-w_t·w_{z_k})`.
pub fn sgns_loss(w_t: &[f32], w_c: &[f32], negs: &[&[f32]]) -> f64 {
    let mut loss = -log_sigmoid(dot64(w_t, w_c));
    for z in negs {
        loss -= log_sigmoid(-dot64(w_t, z));
    }
    loss
}

/// Gradient of [`sgns_loss`] with respect to each input vector.
#[derive(Clone, Debug)]
pub struct SgnsGradient {
    pub target: Vec<f64>,
    pub context: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
}

pub fn sgns_gradient(w_t: &[f32], w_c: &[f32], negs: &[&[f32]]) -> SgnsGradient {
    let g_c = sigmoid(dot64(w_t, w_c)) - 1.0;
    let mut target: Vec<f64> = w_c.iter().map(|&c| g_c * c as f64).collect();
    let context = w_t.iter().map(|&t| g_c * t as f64).collect();
    let mut negatives = Vec::with_capacity(negs.len());
    for z in negs {
        let g_z = sigmoid(dot64(w_t, z));
        for (acc, &zj) in target.iter_mut().zip(z.iter()) {
            *acc += g_z * zj as f64;
        }
        negatives.push(w_t.iter().map(|&t| g_z * t as f64).collect());
    }
    SgnsGradient {
        target,
        context,
        negatives,
    }
}

/// Target (`w`) and context (`w'`) tables; the target table is the label
/// embedding returned to callers.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelEmbeddings {
    pub target: DenseMatrix,
    pub context: DenseMatrix,
}

impl LabelEmbeddings {
    pub fn new(target: DenseMatrix, context: DenseMatrix) -> Result<Self> {
        if target.n_rows() != context.n_rows() || target.n_cols() != context.n_cols() {
            return Err(Error::Shape("target and context tables differ in shape".into()));
        }
        Ok(Self { target, context })
    }

    pub fn dim(&self) -> usize {
        self.target.n_cols()
    }

    pub fn n_labels(&self) -> usize {
        self.target.n_rows()
    }
}

/// Row storage the training kernel reads from and writes to.
trait RowStore {
    fn read(&self, row: usize, out: &mut [f32]);
    fn axpy(&mut self, row: usize, scale: f32, x: &[f32]);
}

struct PlainRows<'a> {
    data: &'a mut [f32],
    dim: usize,
}

impl RowStore for PlainRows<'_> {
    fn read(&self, row: usize, out: &mut [f32]) {
        out.copy_from_slice(&self.data[row * self.dim..(row + 1) * self.dim]);
    }

    fn axpy(&mut self, row: usize, scale: f32, x: &[f32]) {
        for (d, &v) in self.data[row * self.dim..(row + 1) * self.dim]
            .iter_mut()
            .zip(x)
        {
            *d += scale * v;
        }
    }
}

/// Lock-free shared rows: concurrent updates to the same row may be lost,
/// which the asynchronous trainer accepts.
struct SharedRows<'a> {
    data: &'a [AtomicU32],
    dim: usize,
}

impl RowStore for SharedRows<'_> {
    fn read(&self, row: usize, out: &mut [f32]) {
        for (o, a) in out.iter_mut().zip(&self.data[row * self.dim..(row + 1) * self.dim]) {
            *o = f32::from_bits(a.load(Ordering::Relaxed));
        }
    }

    fn axpy(&mut self, row: usize, scale: f32, x: &[f32]) {
        for (a, &v) in self.data[row * self.dim..(row + 1) * self.dim].iter().zip(x) {
            let cur = f32::from_bits(a.load(Ordering::Relaxed));
            a.store((cur + scale * v).to_bits(), Ordering::Relaxed);
        }
    }
}

struct Scratch {
    target: Vec<f32>,
    rows: Vec<Vec<f32>>,
    coef: Vec<f64>,
    grad_t: Vec<f64>,
}

impl Scratch {
    fn new(dim: usize, n_neg: usize) -> Self {
        Self {
            target: vec![0.0; dim],
            rows: vec![vec![0.0; dim]; n_neg + 1],
            coef: vec![0.0; n_neg + 1],
            grad_t: vec![0.0; dim],
        }
    }
}

/// One exact gradient step: every coefficient is evaluated at the current
/// parameters before any row is written. Returns the loss before the step.
fn step_kernel<T: RowStore, C: RowStore>(
    targets: &mut T,
    contexts: &mut C,
    scratch: &mut Scratch,
    target: u32,
    context: u32,
    negatives: &[u32],
    lr: f32,
) -> f64 {
    let k = negatives.len() + 1;
    targets.read(target as usize, &mut scratch.target);
    let mut loss = 0.0;
    for (slot, row) in std::iter::once(context).chain(negatives.iter().copied()).enumerate() {
        contexts.read(row as usize, &mut scratch.rows[slot]);
        let s = dot64(&scratch.target, &scratch.rows[slot]);
        if slot == 0 {
            scratch.coef[0] = sigmoid(s) - 1.0;
            loss -= log_sigmoid(s);
        } else {
            scratch.coef[slot] = sigmoid(s);
            loss -= log_sigmoid(-s);
        }
    }
    scratch.grad_t.iter_mut().for_each(|g| *g = 0.0);
    for slot in 0..k {
        let g = scratch.coef[slot];
        for (acc, &v) in scratch.grad_t.iter_mut().zip(&scratch.rows[slot]) {
            *acc += g * v as f64;
        }
    }
    for (slot, row) in std::iter::once(context).chain(negatives.iter().copied()).enumerate() {
        contexts.axpy(row as usize, -lr * scratch.coef[slot] as f32, &scratch.target);
    }
    let delta: Vec<f32> = scratch.grad_t.iter().map(|&g| g as f32).collect();
    targets.axpy(target as usize, -lr, &delta);
    loss
}

/// Applies one SGD step of [`sgns_loss`] to the embedding tables and returns
/// the loss evaluated before the update.
pub fn sgns_step(
    emb: &mut LabelEmbeddings,
    target: u32,
    context: u32,
    negatives: &[u32],
    lr: f32,
) -> f64 {
    let dim = emb.dim();
    let mut scratch = Scratch::new(dim, negatives.len());
    let mut targets = PlainRows {
        data: emb.target.values_mut(),
        dim,
    };
    let mut contexts = PlainRows {
        data: emb.context.values_mut(),
        dim,
    };
    step_kernel(
        &mut targets,
        &mut contexts,
        &mut scratch,
        target,
        context,
        negatives,
        lr,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct L2VConfig {
    pub dim: usize,
    pub n_neg: usize,
    pub ns_exponent: f64,
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub seed: u64,
    /// Worker threads; 1 gives bitwise-reproducible output.
    pub workers: usize,
}

impl Default for L2VConfig {
    fn default() -> Self {
        Self {
            dim: 100,
            n_neg: 20,
            ns_exponent: 0.5,
            epochs: 20,
            lr_max: 2.5e-2,
            lr_min: 1e-4,
            seed: 0,
            workers: 1,
        }
    }
}

impl L2VConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("label2vec dim must be positive".into()));
        }
        if self.n_neg == 0 {
            return Err(Error::Config("label2vec needs at least one negative".into()));
        }
        if self.lr_min.is_nan() || self.lr_min <= 0.0 || self.lr_max < self.lr_min {
            return Err(Error::Config(format!(
                "label2vec learning rates must satisfy lr_max >= lr_min > 0 (got {} / {})",
                self.lr_max, self.lr_min
            )));
        }
        if self.workers == 0 {
            return Err(Error::Config("label2vec workers must be at least 1".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: u64, total: u64) -> f32 {
        let progress = if total == 0 { 0.0 } else { step as f64 / total as f64 };
        (self.lr_max + (self.lr_min - self.lr_max) * progress.min(1.0)) as f32
    }
}

const MAX_REDRAWS: usize = 64;

fn draw_negatives<R: Rng>(table: &NegativeTable, context: u32, n: usize, rng: &mut R, out: &mut Vec<u32>) {
    out.clear();
    for _ in 0..n {
        for _ in 0..MAX_REDRAWS {
            let z = table.sample(rng);
            if z != context {
                out.push(z);
                break;
            }
        }
    }
}

/// Trains label embeddings; learning rate decays linearly from `lr_max` to
/// `lr_min` over all steps. Target rows start uniform in `±0.5/dim`, context
/// rows at zero.
pub fn train_label2vec(corpus: &LabelCorpus, config: &L2VConfig) -> Result<LabelEmbeddings> {
    config.validate()?;
    if corpus.sequences.is_empty() {
        return Err(Error::Data("label corpus is empty".into()));
    }
    let (n_labels, dim) = (corpus.n_labels, config.dim);
    let table = build_negative_table(&corpus.counts, config.ns_exponent)?;

    let mut init_rng = seed::rng(seed::derive(config.seed, "label2vec/init"));
    let bound = 0.5 / dim as f32;
    let target_init: Vec<f32> = (0..n_labels * dim)
        .map(|_| init_rng.random_range(-bound..=bound))
        .collect();
    let mut target = DenseMatrix::new(n_labels, dim, target_init)?;
    let mut context = DenseMatrix::zeros(n_labels, dim);

    let total = (corpus.n_pairs() * config.epochs) as u64;
    let shuffle_seed = seed::derive(config.seed, "label2vec/shuffle");
    let negative_seed = seed::derive(config.seed, "label2vec/negatives");

    if config.workers == 1 {
        let mut targets = PlainRows {
            data: target.values_mut(),
            dim,
        };
        let mut contexts = PlainRows {
            data: context.values_mut(),
            dim,
        };
        let mut scratch = Scratch::new(dim, config.n_neg);
        let mut rng = seed::rng(negative_seed);
        let mut negs = Vec::with_capacity(config.n_neg);
        let mut step = 0u64;
        for epoch in 0..config.epochs {
            let mut loss_sum = 0.0;
            let pairs = epoch_pairs(corpus, shuffle_seed, epoch);
            for &(t, c) in &pairs {
                draw_negatives(&table, c, config.n_neg, &mut rng, &mut negs);
                let lr = config.lr_at(step, total);
                loss_sum += step_kernel(&mut targets, &mut contexts, &mut scratch, t, c, &negs, lr);
                step += 1;
            }
            debug!(
                "label2vec epoch {epoch}: mean loss {:.5}",
                loss_sum / pairs.len().max(1) as f64
            );
        }
    } else {
        let to_atomic = |m: &DenseMatrix| -> Vec<AtomicU32> {
            m.values().iter().map(|v| AtomicU32::new(v.to_bits())).collect()
        };
        let shared_t = to_atomic(&target);
        let shared_c = to_atomic(&context);
        let progress = AtomicU64::new(0);
        for epoch in 0..config.epochs {
            let pairs = epoch_pairs(corpus, shuffle_seed, epoch);
            let chunk = pairs.len().div_ceil(config.workers).max(1);
            std::thread::scope(|s| {
                for (w, part) in pairs.chunks(chunk).enumerate() {
                    let (shared_t, shared_c, progress, table) = (&shared_t, &shared_c, &progress, &table);
                    s.spawn(move || {
                        let mut targets = SharedRows { data: shared_t, dim };
                        let mut contexts = SharedRows { data: shared_c, dim };
                        let mut scratch = Scratch::new(dim, config.n_neg);
                        let worker_seed = seed::derive_indexed(
                            negative_seed,
                            (epoch * config.workers + w) as u64,
                        );
                        let mut rng = seed::rng(worker_seed);
                        let mut negs = Vec::with_capacity(config.n_neg);
                        for &(t, c) in part {
                            draw_negatives(table, c, config.n_neg, &mut rng, &mut negs);
                            let step = progress.fetch_add(1, Ordering::Relaxed);
                            let lr = config.lr_at(step, total);
                            step_kernel(&mut targets, &mut contexts, &mut scratch, t, c, &negs, lr);
                        }
                    });
                }
            });
        }
        let from_atomic = |a: &[AtomicU32]| -> Vec<f32> {
            a.iter().map(|x| f32::from_bits(x.load(Ordering::Relaxed))).collect()
        };
        target = DenseMatrix::new(n_labels, dim, from_atomic(&shared_t))?;
        context = DenseMatrix::new(n_labels, dim, from_atomic(&shared_c))?;
    }

    if !target.is_finite() || !context.is_finite() {
        return Err(Error::Numeric("label2vec produced non-finite embeddings".into()));
    }
    LabelEmbeddings::new(target, context)
}
