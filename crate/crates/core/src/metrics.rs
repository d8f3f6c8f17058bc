//! Screening metrics: virtual-hit recall, concordance index, Pearson, MSE,
//! plus the pChEMBL conversion and embedding export.

use serde::Serialize;
use thiserror::Error;

use crate::data::HitDirection;
use crate::featurize::FeaturizedGraph;
use crate::model::{embed, GraphBatch, ModelError, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} true values vs {1} predictions")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("hit count k = {k} must lie in 1..={n}")]
    BadK { k: usize, n: usize },
    #[error("cutoff fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("NaN score at index {0}")]
    NaN(usize),
    #[error("all true values are equal; no ordered pair exists")]
    NoOrderedPairs,
    #[error("zero variance")]
    ZeroVariance,
    #[error("IC50 must be positive, got {0}")]
    NonPositiveIc50(f64),
}

fn check_pair(y: &[f64], y_hat: &[f64], needed: usize) -> Result<(), MetricError> {
    if y.len() != y_hat.len() {
        return Err(MetricError::LengthMismatch(y.len(), y_hat.len()));
    }
    if y.len() < needed {
        return Err(MetricError::TooFew { needed, got: y.len() });
    }
    if let Some(i) = y.iter().chain(y_hat).position(|v| v.is_nan()) {
        return Err(MetricError::NaN(i % y.len()));
    }
    Ok(())
}

/// Indices of the `count` best scores in hit direction; ties keep index order.
pub fn top_indices(scores: &[f64], direction: HitDirection, count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| direction.rank_key(scores[a]).total_cmp(&direction.rank_key(scores[b])));
    idx.truncate(count);
    idx
}

/// Number of predicted hits for cutoff fraction `p` over `n` compounds.
pub fn predicted_hit_count(p: f64, n: usize) -> usize {
    ((p * n as f64).ceil() as usize).min(n)
}

/// Fraction of the `k` true virtual hits found among the `ceil(p·n)` best
/// predictions.
pub fn recall_at(
    y: &[f64],
    y_hat: &[f64],
    direction: HitDirection,
    k: usize,
    p: f64,
) -> Result<f64, MetricError> {
    check_pair(y, y_hat, 1)?;
    let n = y.len();
    if k == 0 || k > n {
        return Err(MetricError::BadK { k, n });
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(MetricError::BadFraction(p));
    }
    let mut is_true_hit = vec![false; n];
    for i in top_indices(y, direction, k) {
        is_true_hit[i] = true;
    }
    let found = top_indices(y_hat, direction, predicted_hit_count(p, n))
        .into_iter()
        .filter(|&i| is_true_hit[i])
        .count();
    Ok(found as f64 / k as f64)
}

/// Fenwick tree over ranks, counting inserted values.
struct Fenwick(Vec<u64>);

impl Fenwick {
    fn add(&mut self, mut i: usize) {
        i += 1;
        while i < self.0.len() {
            self.0[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Count of inserted ranks `< i`.
    fn prefix(&self, mut i: usize) -> u64 {
        let mut s = 0;
        while i > 0 {
            s += self.0[i];
            i -= i & i.wrapping_neg();
        }
        s
    }
}

/// Fraction of strictly ordered true pairs whose predictions are strictly
/// ordered the same way. Tied predictions earn nothing.
pub fn concordance_index(y: &[f64], y_hat: &[f64]) -> Result<f64, MetricError> {
    check_pair(y, y_hat, 2)?;
    let n = y.len();
    // Dense ranks of predictions.
    let mut by_pred: Vec<usize> = (0..n).collect();
    by_pred.sort_by(|&a, &b| y_hat[a].total_cmp(&y_hat[b]));
    let mut pred_rank = vec![0usize; n];
    let mut r = 0;
    for w in 0..n {
        if w > 0 && y_hat[by_pred[w]] != y_hat[by_pred[w - 1]] {
            r += 1;
        }
        pred_rank[by_pred[w]] = r;
    }
    // Sweep compounds in increasing true value; each group of equal y is
    // compared against everything strictly below it.
    let mut by_true: Vec<usize> = (0..n).collect();
    by_true.sort_by(|&a, &b| y[a].total_cmp(&y[b]));
    let mut tree = Fenwick(vec![0; r + 2]);
    let (mut concordant, mut ordered) = (0u64, 0u64);
    let mut inserted = 0u64;
    let mut g = 0;
    while g < n {
        let mut end = g;
        while end < n && y[by_true[end]] == y[by_true[g]] {
            end += 1;
        }
        for &k in &by_true[g..end] {
            ordered += inserted;
            concordant += tree.prefix(pred_rank[k]);
        }
        for &k in &by_true[g..end] {
            tree.add(pred_rank[k]);
            inserted += 1;
        }
        g = end;
    }
    if ordered == 0 {
        return Err(MetricError::NoOrderedPairs);
    }
    Ok(concordant as f64 / ordered as f64)
}

pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64, MetricError> {
    check_pair(y, y_hat, 1)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}

pub fn pearson(y: &[f64], y_hat: &[f64]) -> Result<f64, MetricError> {
    check_pair(y, y_hat, 2)?;
    let n = y.len() as f64;
    let mx = y.iter().sum::<f64>() / n;
    let my = y_hat.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(y_hat) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// `-log10` of a molar IC50.
pub fn pchembl(ic50_molar: f64) -> Result<f64, MetricError> {
    if ic50_molar.is_nan() || ic50_molar <= 0.0 {
        return Err(MetricError::NonPositiveIc50(ic50_molar));
    }
    Ok(-ic50_molar.log10())
}

/// One row of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub metric: String,
    pub task: String,
    pub value: f64,
    pub k: Option<usize>,
    pub p: Option<f64>,
}

/// MSE, Pearson and CI for one task, then recall over the `(k, p)` grid.
/// Metrics that are undefined for the data (zero variance and the like) are
/// skipped.
pub fn report(
    task: &str,
    y: &[f64],
    y_hat: &[f64],
    direction: HitDirection,
    ks: &[usize],
    ps: &[f64],
) -> Result<Vec<MetricRow>, MetricError> {
    check_pair(y, y_hat, 1)?;
    let row = |metric: &str, value, k, p| MetricRow {
        metric: metric.to_string(),
        task: task.to_string(),
        value,
        k,
        p,
    };
    let mut rows = vec![row("mse", mse(y, y_hat)?, None, None)];
    if let Ok(r) = pearson(y, y_hat) {
        rows.push(row("pearson", r, None, None));
    }
    if let Ok(ci) = concordance_index(y, y_hat) {
        rows.push(row("concordance_index", ci, None, None));
    }
    for &k in ks {
        for &p in ps {
            rows.push(row("recall", recall_at(y, y_hat, direction, k, p)?, Some(k), Some(p)));
        }
    }
    Ok(rows)
}

/// Eval-mode graph embeddings, one row per graph.
pub fn export_embeddings(
    params: &ModelParams,
    graphs: &[&FeaturizedGraph],
    batch_size: usize,
) -> Result<Tensor, ModelError> {
    let mut data = Vec::with_capacity(graphs.len() * params.config.dim);
    for chunk in graphs.chunks(batch_size.max(1)) {
        data.extend(embed(params, &GraphBatch::new(chunk)?)?.into_data());
    }
    Ok(Tensor::new(graphs.len(), params.config.dim, data)?)
}
