//! Small synthetic corpora with a known two-group label structure.
//!
//! Labels `0..5` form group A and `5..10` group B. A sample draws its labels
//! from exactly one group, so labels of the same group co-occur and labels of
//! different groups never do. Text features carry per-label signature terms,
//! shared group terms, and background noise.

use rand::seq::index::sample;
use rand::Rng;

use crate::data::{Dataset, SparseMatrix};
use crate::error::Result;
use crate::label2vec::LabelCorpus;
use crate::seed;

pub const N_LABELS: usize = 10;
pub const GROUP_SIZE: usize = 5;

const SIGNATURE_PER_LABEL: usize = 6;
const GROUP_TERMS: usize = 10;
const NOISE_TERMS: usize = 40;

/// Number of feature columns in [`two_group_dataset`].
pub const N_FEATURES: usize = N_LABELS * SIGNATURE_PER_LABEL + 2 * GROUP_TERMS + NOISE_TERMS;

pub fn group_of(label: u32) -> usize {
    label as usize / GROUP_SIZE
}

fn draw_labels<R: Rng>(rng: &mut R) -> Vec<u32> {
    let group = rng.random_range(0..2u32);
    let m = rng.random_range(1..=3);
    let mut labels: Vec<u32> = sample(rng, GROUP_SIZE, m)
        .into_iter()
        .map(|i| group * GROUP_SIZE as u32 + i as u32)
        .collect();
    labels.sort_unstable();
    labels
}

/// Label sets only; used to exercise label2vec on its own.
pub fn two_group_corpus(n_samples: usize, seed: u64) -> LabelCorpus {
    let mut rng = seed::rng(seed::derive(seed, "synthetic/corpus"));
    let seqs = (0..n_samples).map(|_| draw_labels(&mut rng)).collect();
    LabelCorpus::new(seqs, N_LABELS).expect("synthetic corpus is valid")
}

fn draw_features<R: Rng>(labels: &[u32], rng: &mut R) -> Vec<(u32, f32)> {
    let mut feats: Vec<(u32, f32)> = Vec::new();
    let mut push = |j: usize, rng: &mut R| {
        let v = rng.random_range(0.5f32..1.5);
        match feats.iter_mut().find(|(k, _)| *k as usize == j) {
            Some((_, old)) => *old += v,
            None => feats.push((j as u32, v)),
        }
    };
    for &l in labels {
        for s in 0..SIGNATURE_PER_LABEL {
            if rng.random_bool(0.7) {
                push(l as usize * SIGNATURE_PER_LABEL + s, rng);
            }
        }
    }
    let group_base = N_LABELS * SIGNATURE_PER_LABEL + group_of(labels[0]) * GROUP_TERMS;
    for _ in 0..3 {
        let j = group_base + rng.random_range(0..GROUP_TERMS);
        push(j, rng);
    }
    let noise_base = N_LABELS * SIGNATURE_PER_LABEL + 2 * GROUP_TERMS;
    for _ in 0..4 {
        let j = noise_base + rng.random_range(0..NOISE_TERMS);
        push(j, rng);
    }
    feats
}

/// Train and test splits of the two-group text classification problem.
pub fn two_group_dataset(n_train: usize, n_test: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let mut rng = seed::rng(seed::derive(seed, "synthetic/dataset"));
    let mut make = |n: usize| -> Result<Dataset> {
        let mut labels = Vec::with_capacity(n);
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            let l = draw_labels(&mut rng);
            rows.push(draw_features(&l, &mut rng));
            labels.push(l);
        }
        Dataset::new(
            SparseMatrix::from_rows(N_FEATURES, rows)?,
            None,
            SparseMatrix::from_label_sets(N_LABELS, &labels)?,
        )
    };
    let train = make(n_train)?;
    let test = make(n_test)?;
    Ok((train, test))
}
