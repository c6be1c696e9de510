//! Connectivity scoring, influential-sample masks, negative-set pruning and
//! proximity loss weights.
//!
//! Connectivity of a sample is its mean cosine similarity to a reference set.
//! Samples whose (possibly max-normalized) connectivity reaches the threshold
//! gamma are influential: they are pruned from negative sets and emphasized by
//! the exp(C/kappa) loss weights.

use serde::{Deserialize, Serialize};

use crate::embedding::{dot, EmbeddingBatch};
use crate::error::{Error, Result};

const DEGENERATE_EPS: f64 = 1e-12;
const EXP_OVERFLOW_LIMIT: f64 = 700.0;

/// How connectivity scores are compared against gamma.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Compare raw connectivity against gamma.
    Absolute,
    /// Divide each score set by its maximum before thresholding.
    MaxRelative,
}

/// Normalization applied to connectivity before the exp(c/kappa) weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightNorm {
    None,
    /// Divide by the sum of scores (norm_w). Keeps exponents small at the
    /// preset-scale kappa values.
    SumToOne,
}

/// Per-sample connectivity, influential mask and loss weights for one modality.
#[derive(Debug, Clone)]
pub struct InfluenceProfile {
    pub connectivity: Vec<f64>,
    pub influential: Vec<bool>,
    pub weights: Vec<f64>,
    pub threshold_mode: ThresholdMode,
    pub weight_norm: WeightNorm,
    pub gamma: f64,
    pub kappa: f64,
}

impl InfluenceProfile {
    pub fn compute(
        connectivity: Vec<f64>,
        gamma: f64,
        kappa: f64,
        threshold_mode: ThresholdMode,
        weight_norm: WeightNorm,
    ) -> Result<Self> {
        let influential = influential_mask(&connectivity, gamma, threshold_mode)?;
        let weights = sample_weights(&connectivity, kappa, weight_norm)?;
        Ok(Self {
            connectivity,
            influential,
            weights,
            threshold_mode,
            weight_norm,
            gamma,
            kappa,
        })
    }
}

/// Mean cosine similarity of each reference row to the target set.
///
/// With `exclude_self` the two batches must be the same set; the j = i term is
/// dropped and the divisor is M - 1. Computed via the column-sum identity
/// mean_j <r_i, t_j> = <r_i, sum_j t_j> / M, which is exact up to float
/// reassociation and O((N + M) * D).
pub fn connectivity(
    reference: &EmbeddingBatch,
    targets: &EmbeddingBatch,
    exclude_self: bool,
) -> Result<Vec<f64>> {
    if reference.dim() != targets.dim() {
        return Err(Error::DimensionMismatch(format!(
            "connectivity: {} vs {}",
            reference.dim(),
            targets.dim()
        )));
    }
    if exclude_self {
        if reference.n() != targets.n() {
            return Err(Error::DimensionMismatch(
                "exclude_self requires reference and targets to be the same set".into(),
            ));
        }
        if reference.n() < 2 {
            return Err(Error::DegenerateSelfExclusion);
        }
    }
    let r = reference.l2_normalize()?;
    let t = targets.l2_normalize()?;
    let m = t.n();
    let mut colsum = vec![0.0; t.dim()];
    for j in 0..m {
        for (k, v) in t.row(j).iter().enumerate() {
            colsum[k] += v;
        }
    }
    let sum_view = ndarray::ArrayView1::from(&colsum);
    let mut c = Vec::with_capacity(r.n());
    for i in 0..r.n() {
        let s = dot(r.row(i), sum_view);
        if exclude_self {
            // the self term of a unit row is exactly 1
            c.push((s - 1.0) / (m - 1) as f64);
        } else {
            c.push(s / m as f64);
        }
    }
    Ok(c)
}

/// Thresholds connectivity into the influential mask. A sample is influential
/// when its (mode-normalized) score reaches gamma, matching the pruning rule
/// that keeps only strictly-below-threshold samples as negatives.
pub fn influential_mask(c: &[f64], gamma: f64, mode: ThresholdMode) -> Result<Vec<bool>> {
    match mode {
        ThresholdMode::Absolute => Ok(c.iter().map(|&v| v >= gamma).collect()),
        ThresholdMode::MaxRelative => {
            let max = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max <= DEGENERATE_EPS {
                return Err(Error::DegenerateScores(format!(
                    "max-relative thresholding needs max(C) > 0, got {max}"
                )));
            }
            Ok(c.iter().map(|&v| v / max >= gamma).collect())
        }
    }
}

/// w_i = exp(c_hat_i / kappa) with c_hat = C (none) or C / sum(C) (sum-to-one).
pub fn sample_weights(c: &[f64], kappa: f64, weight_norm: WeightNorm) -> Result<Vec<f64>> {
    if kappa <= 0.0 {
        return Err(Error::ConfigParse(format!(
            "kappa must be positive, got {kappa}"
        )));
    }
    let normalized: Vec<f64> = match weight_norm {
        WeightNorm::None => c.to_vec(),
        WeightNorm::SumToOne => {
            let sum: f64 = c.iter().sum();
            if sum <= DEGENERATE_EPS {
                return Err(Error::DegenerateScores(format!(
                    "sum-to-one weight normalization needs sum(C) > 0, got {sum}"
                )));
            }
            c.iter().map(|v| v / sum).collect()
        }
    };
    let mut w = Vec::with_capacity(c.len());
    for v in normalized {
        let e = v / kappa;
        if e > EXP_OVERFLOW_LIMIT {
            return Err(Error::WeightOverflow(e));
        }
        w.push(e.exp());
    }
    Ok(w)
}
