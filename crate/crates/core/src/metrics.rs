//! Ranking metrics for multi-label prediction, plain and propensity-scored.
//!
//! Truth sets are ascending label-id slices; predictions are ranked lists,
//! best first. A prediction list shorter than `k` counts as padded with misses.
//! DCG sums use base-2 logarithms.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::SparseMatrix;
use crate::error::{Error, Result};

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("metric cutoff k must be at least 1".into()));
    }
    Ok(())
}

fn hits<'a>(y: &'a [u32], pred: &'a [u32], k: usize) -> impl Iterator<Item = (usize, u32)> + 'a {
    pred.iter()
        .take(k)
        .enumerate()
        .filter(move |(_, l)| y.binary_search(l).is_ok())
        .map(|(r, &l)| (r, l))
}

/// `1 / log2(rank + 2)` for a 0-based rank.
fn discount(rank: usize) -> f64 {
    1.0 / ((rank + 2) as f64).log2()
}

fn ideal_dcg(n: usize) -> f64 {
    (0..n).map(discount).sum()
}

pub fn precision_at_k(y: &[u32], pred: &[u32], k: usize) -> Result<f64> {
    check_k(k)?;
    Ok(hits(y, pred, k).count() as f64 / k as f64)
}

/// DCG over the top `k`, normalized by the ideal DCG of `min(k, |y|)` hits.
pub fn ndcg_at_k(y: &[u32], pred: &[u32], k: usize) -> Result<f64> {
    check_k(k)?;
    if y.is_empty() {
        return Err(Error::Data("nDCG needs at least one true label".into()));
    }
    let dcg: f64 = hits(y, pred, k).map(|(r, _)| discount(r)).sum();
    Ok(dcg / ideal_dcg(k.min(y.len())))
}

/// Per-label propensities `p_l = 1 / (1 + C (N_l + B)^-A)` with
/// `C = (ln N - 1) (B + 1)^A`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub propensities: Vec<f64>,
}

impl PropensityModel {
    pub fn inverse(&self, label: u32) -> f64 {
        1.0 / self.propensities[label as usize]
    }

    fn covers(&self, labels: &[u32], what: &str) -> Result<()> {
        match labels.iter().find(|&&l| l as usize >= self.propensities.len()) {
            Some(l) => Err(Error::Shape(format!(
                "{what} label {l} outside a propensity model over {} labels",
                self.propensities.len()
            ))),
            None => Ok(()),
        }
    }
}

/// Propensities from training label counts over `n` training samples. When
/// `ln N < 1` the formula leaves `(0, 1]`; such values are clamped to 1.
pub fn propensities(label_counts: &[u64], n: usize, a: f64, b: f64) -> Result<PropensityModel> {
    if n == 0 {
        return Err(Error::Data("propensities need at least one training sample".into()));
    }
    if !(a.is_finite() && b.is_finite() && b >= 0.0) {
        return Err(Error::Config(format!("invalid propensity parameters A={a}, B={b}")));
    }
    let c = ((n as f64).ln() - 1.0) * (b + 1.0).powf(a);
    let mut clamped = 0usize;
    let propensities = label_counts
        .iter()
        .map(|&count| {
            let p = 1.0 / (1.0 + c * (-a * (count as f64 + b).ln()).exp());
            if p > 1.0 || !p.is_finite() || p <= 0.0 {
                clamped += 1;
                1.0
            } else {
                p
            }
        })
        .collect();
    if clamped > 0 {
        warn!("{clamped} propensities fell outside (0, 1] and were set to 1");
    }
    Ok(PropensityModel { a, b, c, propensities })
}

/// `(1/k) sum over top-k hits of 1/p`.
pub fn psp_at_k(y: &[u32], pred: &[u32], k: usize, model: &PropensityModel) -> Result<f64> {
    check_k(k)?;
    model.covers(pred, "predicted")?;
    Ok(hits(y, pred, k).map(|(_, l)| model.inverse(l)).sum::<f64>() / k as f64)
}

/// Propensity-scored DCG over the top `k`, normalized by the unit-propensity
/// ideal DCG of all `k` ranks.
pub fn psndcg_at_k(y: &[u32], pred: &[u32], k: usize, model: &PropensityModel) -> Result<f64> {
    check_k(k)?;
    model.covers(pred, "predicted")?;
    let dcg: f64 = hits(y, pred, k).map(|(r, l)| model.inverse(l) * discount(r)).sum();
    Ok(dcg / ideal_dcg(k))
}

/// Row-averaged metrics keyed by cutoff. The propensity-scored maps are empty
/// without a propensity model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_rows: usize,
    pub p_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub psp_at: BTreeMap<usize, f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub psndcg_at: BTreeMap<usize, f64>,
}

impl EvalReport {
    /// One `metric@k value` line per entry, values as percentages.
    pub fn to_text(&self) -> String {
        let mut out = format!("rows {}\n", self.n_rows);
        for (name, map) in [("P", &self.p_at), ("nDCG", &self.ndcg_at), ("PSP", &self.psp_at), ("PSnDCG", &self.psndcg_at)] {
            for (k, v) in map {
                out.push_str(&format!("{name}@{k} {:.2}\n", 100.0 * v));
            }
        }
        out
    }
}

/// Averages every metric over the rows of `truth` for each cutoff in `ks`.
pub fn evaluate(
    truth: &SparseMatrix,
    predictions: &[Vec<u32>],
    ks: &[usize],
    model: Option<&PropensityModel>,
) -> Result<EvalReport> {
    if truth.n_rows() != predictions.len() {
        return Err(Error::Shape(format!(
            "{} truth rows with {} prediction rows",
            truth.n_rows(),
            predictions.len()
        )));
    }
    let n = truth.n_rows();
    let mut report = EvalReport { n_rows: n, ..EvalReport::default() };
    if let Some(m) = model {
        if m.propensities.len() != truth.n_cols() {
            return Err(Error::Shape(format!(
                "propensity model over {} labels for {} label columns",
                m.propensities.len(),
                truth.n_cols()
            )));
        }
    }
    for &k in ks {
        check_k(k)?;
        let (mut p, mut nd, mut psp, mut psn) = (0.0, 0.0, 0.0, 0.0);
        for (i, pred) in predictions.iter().enumerate() {
            let y = truth.row(i).indices;
            p += precision_at_k(y, pred, k)?;
            nd += ndcg_at_k(y, pred, k).map_err(|e| match e {
                Error::Data(msg) => Error::Data(format!("row {i}: {msg}")),
                other => other,
            })?;
            if let Some(m) = model {
                psp += psp_at_k(y, pred, k, m)?;
                psn += psndcg_at_k(y, pred, k, m)?;
            }
        }
        let denom = n.max(1) as f64;
        report.p_at.insert(k, p / denom);
        report.ndcg_at.insert(k, nd / denom);
        if model.is_some() {
            report.psp_at.insert(k, psp / denom);
            report.psndcg_at.insert(k, psn / denom);
        }
    }
    Ok(report)
}
