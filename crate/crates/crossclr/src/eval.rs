//! Cross-modal retrieval metrics (recall at K, median and mean rank) and
//! positive/negative similarity score distributions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarity_matrix, EmbeddingBatch};
use crate::error::{Error, Result};

/// Retrieval quality for one query direction.
///
/// Ranks are 1-based; ties count against the query, so reported recalls are
/// a deterministic lower bound. Median rank uses the lower median for even N.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalReport {
    /// "a_to_b" or "b_to_a".
    pub direction: String,
    /// K -> fraction of queries whose match ranks at or above K.
    pub r_at: BTreeMap<usize, f64>,
    pub mdr: f64,
    pub mnr: f64,
    pub ranks: Vec<usize>,
}

fn ranks_from_scores(scores: &ndarray::Array2<f64>) -> Vec<usize> {
    let n = scores.nrows();
    (0..n)
        .map(|i| {
            let own = scores[[i, i]];
            1 + (0..n).filter(|&j| j != i && scores[[i, j]] >= own).count()
        })
        .collect()
}

fn report_from_ranks(direction: &str, ranks: Vec<usize>, ks: &[usize]) -> RetrievalReport {
    let n = ranks.len();
    let mut r_at = BTreeMap::new();
    for &k in ks {
        let hits = ranks.iter().filter(|&&r| r <= k).count();
        r_at.insert(k, hits as f64 / n as f64);
    }
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    // lower median for even n
    let mdr = sorted[(n - 1) / 2] as f64;
    let mnr = ranks.iter().sum::<usize>() as f64 / n as f64;
    RetrievalReport {
        direction: direction.to_string(),
        r_at,
        mdr,
        mnr,
        ranks,
    }
}

/// Ranks each row's true match among all columns of the cosine matrix, in
/// both query directions.
pub fn evaluate_retrieval(
    zx: &EmbeddingBatch,
    zy: &EmbeddingBatch,
    ks: &[usize],
) -> Result<(RetrievalReport, RetrievalReport)> {
    if zx.n() != zy.n() {
        return Err(Error::DimensionMismatch(format!(
            "retrieval needs paired batches, got {} vs {}",
            zx.n(),
            zy.n()
        )));
    }
    if ks.is_empty() {
        return Err(Error::InvalidShape("empty K list".into()));
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > zx.n()) {
        return Err(Error::InvalidShape(format!(
            "K = {k} out of range for {} samples",
            zx.n()
        )));
    }
    let s = cosine_similarity_matrix(zx, zy)?;
    let fwd = report_from_ranks("a_to_b", ranks_from_scores(&s.scores), ks);
    let bwd = report_from_ranks("b_to_a", ranks_from_scores(&s.scores.t().to_owned()), ks);
    Ok((fwd, bwd))
}

/// Histograms of matched-pair vs mismatched-pair cosine scores.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    pub positive_scores: Vec<f64>,
    pub negative_scores: Vec<f64>,
    /// bins + 1 edges covering [-1, 1].
    pub bin_edges: Vec<f64>,
    pub positive_counts: Vec<usize>,
    pub negative_counts: Vec<usize>,
    pub positive_mean: f64,
    pub positive_variance: f64,
    pub negative_mean: f64,
    pub negative_variance: f64,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

fn bin_counts(v: &[f64], edges: &[f64]) -> Vec<usize> {
    let bins = edges.len() - 1;
    let lo = edges[0];
    let hi = edges[bins];
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in v {
        let idx = (((x - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
        counts[idx] += 1;
    }
    counts
}

/// Splits the cross-modal cosine matrix into diagonal (positive) and
/// off-diagonal (negative) scores and bins both over [-1, 1].
pub fn similarity_histograms(
    zx: &EmbeddingBatch,
    zy: &EmbeddingBatch,
    bins: usize,
) -> Result<SimilarityHistogram> {
    if zx.n() != zy.n() {
        return Err(Error::DimensionMismatch(format!(
            "histograms need paired batches, got {} vs {}",
            zx.n(),
            zy.n()
        )));
    }
    if zx.n() < 2 {
        return Err(Error::BatchTooSmall(zx.n()));
    }
    if bins < 2 {
        return Err(Error::InvalidShape(format!("need at least 2 bins, got {bins}")));
    }
    let s = cosine_similarity_matrix(zx, zy)?;
    let n = zx.n();
    let mut positive_scores = Vec::with_capacity(n);
    let mut negative_scores = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                positive_scores.push(s.scores[[i, j]]);
            } else {
                negative_scores.push(s.scores[[i, j]]);
            }
        }
    }
    let bin_edges: Vec<f64> = (0..=bins)
        .map(|b| -1.0 + 2.0 * b as f64 / bins as f64)
        .collect();
    let positive_counts = bin_counts(&positive_scores, &bin_edges);
    let negative_counts = bin_counts(&negative_scores, &bin_edges);
    let (positive_mean, positive_variance) = mean_var(&positive_scores);
    let (negative_mean, negative_variance) = mean_var(&negative_scores);
    Ok(SimilarityHistogram {
        positive_scores,
        negative_scores,
        bin_edges,
        positive_counts,
        negative_counts,
        positive_mean,
        positive_variance,
        negative_mean,
        negative_variance,
    })
}
