//! Loss value + gradient kernels: the cross-modal contrastive loss with
//! intra-modality alignment, influential-sample pruning and proximity
//! weighting (batch and queue modes, plus the multiple-positives variant),
//! and the NT-Xent / symmetric-InfoNCE / max-margin baselines.

mod baselines;
mod gradcheck;
mod kernel;

pub use baselines::{clip_symmetric, max_margin, ntxent};
pub use gradcheck::{
    finite_diff_check, gradcheck_battery, BatteryCase, GradCheckConfig, GradCheckReport,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding::{cosine_similarity_matrix, EmbeddingBatch};
use crate::error::{Error, Result};
use crate::influence::{
    connectivity, influential_mask, sample_weights, ThresholdMode, WeightNorm,
};
use crate::queue::MemoryQueue;
use kernel::{contrastive_side, normalize_backward, normalize_rows, ExtraPositives, IntraPlan, SidePlan};

/// How per-sample weighted losses are reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// sum(w * l) / sum(w), the pseudocode's weighted mean. Default.
    WeightedMean,
    /// mean(w * l), the literal expectation with the weight inside.
    Expectation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda_intra: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub threshold_mode: ThresholdMode,
    pub weight_norm: WeightNorm,
    pub pruning_enabled: bool,
    pub weighting_enabled: bool,
    pub intra_enabled: bool,
    pub reduction: Reduction,
    /// Max-margin baseline only.
    pub margin: f64,
    /// Multiple-positives scale; 0 disables the variant.
    pub beta: f64,
    /// Multiple-positives count.
    pub top_k: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::youcook2()
    }
}

impl LossConfig {
    /// tau = 0.03, gamma = 0.9, kappa = 0.0035, lambda = 0.8.
    pub fn youcook2() -> Self {
        Self {
            tau: 0.03,
            lambda_intra: 0.8,
            gamma: 0.9,
            kappa: 0.0035,
            threshold_mode: ThresholdMode::MaxRelative,
            weight_norm: WeightNorm::SumToOne,
            pruning_enabled: true,
            weighting_enabled: true,
            intra_enabled: true,
            reduction: Reduction::WeightedMean,
            margin: 0.2,
            beta: 0.0,
            top_k: 0,
        }
    }

    /// kappa = 0.0055, lambda = 6.5.
    pub fn lsmdc() -> Self {
        Self {
            kappa: 0.0055,
            lambda_intra: 6.5,
            ..Self::youcook2()
        }
    }

    fn effective_lambda(&self) -> f64 {
        if self.intra_enabled {
            self.lambda_intra
        } else {
            0.0
        }
    }
}

/// Per-call masks, weights and per-anchor terms for inspection.
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    /// Influential (pruned) masks over the inter-modality candidate sets.
    pub pruned_inter_x: Vec<bool>,
    pub pruned_inter_y: Vec<bool>,
    /// Influential (pruned) masks over the intra-modality key sets.
    pub pruned_intra_x: Vec<bool>,
    pub pruned_intra_y: Vec<bool>,
    pub weights_x: Vec<f64>,
    pub weights_y: Vec<f64>,
    pub n_negatives_x: Vec<usize>,
    pub n_negatives_y: Vec<usize>,
    pub per_anchor_x: Vec<f64>,
    pub per_anchor_y: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    /// Exact gradient w.r.t. the raw zx rows (normalization included).
    pub grad_zx: Array2<f64>,
    pub grad_zy: Array2<f64>,
    pub diagnostics: Diagnostics,
}

/// Projects raw input embeddings into the joint space. Used to embed queued
/// intra-modality negatives through the current encoder.
pub trait Projector {
    fn project(&self, batch: &EmbeddingBatch) -> Result<EmbeddingBatch>;
}

/// l2-normalization only; handy when raw inputs already live in the joint space.
pub struct IdentityProjector;

impl Projector for IdentityProjector {
    fn project(&self, batch: &EmbeddingBatch) -> Result<EmbeddingBatch> {
        batch.l2_normalize()
    }
}

fn check_paired(zx: &EmbeddingBatch, zy: &EmbeddingBatch) -> Result<usize> {
    if zx.n() != zy.n() {
        return Err(Error::DimensionMismatch(format!(
            "paired batches differ in size: {} vs {}",
            zx.n(),
            zy.n()
        )));
    }
    if zx.dim() != zy.dim() {
        return Err(Error::DimensionMismatch(format!(
            "joint-space dims differ: {} vs {}",
            zx.dim(),
            zy.dim()
        )));
    }
    if zx.n() < 2 {
        return Err(Error::BatchTooSmall(zx.n()));
    }
    Ok(zx.n())
}

struct IntraSpec {
    keys: Array2<f64>,
    influential: Vec<bool>,
    self_offset: Option<usize>,
    with_grad: bool,
}

struct SideSpec {
    /// Influential mask over the inter candidates (true = pruned).
    inter_influential: Vec<bool>,
    intra: Option<IntraSpec>,
    weights: Vec<f64>,
    extra_pos: Option<(Vec<Vec<usize>>, f64)>,
}

fn masks_and_weights(
    conn: &[f64],
    cfg: &LossConfig,
    pruning: bool,
    weighting: bool,
) -> Result<(Vec<bool>, Vec<f64>)> {
    let mask = if pruning {
        influential_mask(conn, cfg.gamma, cfg.threshold_mode)?
    } else {
        vec![false; conn.len()]
    };
    let weights = if weighting {
        sample_weights(conn, cfg.kappa, cfg.weight_norm)?
    } else {
        vec![1.0; conn.len()]
    };
    Ok((mask, weights))
}

fn reduction_scales(weights: &[f64], reduction: Reduction) -> Vec<f64> {
    let denom = match reduction {
        Reduction::WeightedMean => weights.iter().sum::<f64>(),
        Reduction::Expectation => weights.len() as f64,
    };
    weights.iter().map(|w| 0.5 * w / denom).collect()
}

/// Runs both sides and assembles value, gradients and diagnostics.
fn assemble(
    zx: &EmbeddingBatch,
    zy: &EmbeddingBatch,
    side_x: SideSpec,
    side_y: SideSpec,
    cfg: &LossConfig,
    lambda: f64,
) -> Result<LossOutput> {
    let (ux, norms_x) = normalize_rows(zx.data())?;
    let (uy, norms_y) = normalize_rows(zy.data())?;

    let scales_x = reduction_scales(&side_x.weights, cfg.reduction);
    let scales_y = reduction_scales(&side_y.weights, cfg.reduction);

    let keep = |mask: &[bool]| -> Vec<bool> { mask.iter().map(|&m| !m).collect() };
    let inter_keep_x = keep(&side_x.inter_influential);
    let inter_keep_y = keep(&side_y.inter_influential);
    let intra_keep_x = side_x.intra.as_ref().map(|s| keep(&s.influential));
    let intra_keep_y = side_y.intra.as_ref().map(|s| keep(&s.influential));

    let plan_x = SidePlan {
        anchors: &ux,
        cross: &uy,
        inter_keep: &inter_keep_x,
        intra: side_x.intra.as_ref().map(|s| IntraPlan {
            keys: &s.keys,
            keep: intra_keep_x.as_deref().unwrap(),
            self_offset: s.self_offset,
            with_grad: s.with_grad,
        }),
        extra_pos: side_x
            .extra_pos
            .as_ref()
            .map(|(idx, beta)| ExtraPositives {
                indices: idx,
                beta: *beta,
            }),
        tau: cfg.tau,
        lambda,
        anchor_scale: &scales_x,
    };
    let res_x = contrastive_side(&plan_x)?;

    let plan_y = SidePlan {
        anchors: &uy,
        cross: &ux,
        inter_keep: &inter_keep_y,
        intra: side_y.intra.as_ref().map(|s| IntraPlan {
            keys: &s.keys,
            keep: intra_keep_y.as_deref().unwrap(),
            self_offset: s.self_offset,
            with_grad: s.with_grad,
        }),
        extra_pos: side_y
            .extra_pos
            .as_ref()
            .map(|(idx, beta)| ExtraPositives {
                indices: idx,
                beta: *beta,
            }),
        tau: cfg.tau,
        lambda,
        anchor_scale: &scales_y,
    };
    let res_y = contrastive_side(&plan_y)?;

    let mut value = 0.0;
    for (l, s) in res_x.per_anchor.iter().zip(&scales_x) {
        value += l * s;
    }
    for (l, s) in res_y.per_anchor.iter().zip(&scales_y) {
        value += l * s;
    }
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss);
    }

    let mut grad_ux = res_x.grad_anchors;
    if let Some(gk) = res_x.grad_keys {
        grad_ux += &gk;
    }
    grad_ux += &res_y.grad_cross;

    let mut grad_uy = res_y.grad_anchors;
    if let Some(gk) = res_y.grad_keys {
        grad_uy += &gk;
    }
    grad_uy += &res_x.grad_cross;

    let grad_zx = normalize_backward(&ux, &norms_x, &grad_ux);
    let grad_zy = normalize_backward(&uy, &norms_y, &grad_uy);

    let diagnostics = Diagnostics {
        pruned_intra_x: side_x
            .intra
            .as_ref()
            .map(|s| s.influential.clone())
            .unwrap_or_default(),
        pruned_intra_y: side_y
            .intra
            .as_ref()
            .map(|s| s.influential.clone())
            .unwrap_or_default(),
        pruned_inter_x: side_x.inter_influential,
        pruned_inter_y: side_y.inter_influential,
        weights_x: side_x.weights,
        weights_y: side_y.weights,
        n_negatives_x: res_x.n_negatives,
        n_negatives_y: res_y.n_negatives,
        per_anchor_x: res_x.per_anchor,
        per_anchor_y: res_y.per_anchor,
    };

    Ok(LossOutput {
        value,
        grad_zx,
        grad_zy,
        diagnostics,
    })
}

/// CrossCLR with in-batch negatives. Connectivity, pruning masks and loss
/// weights come from the raw input embeddings; gradients flow into both
/// projected batches.
pub fn crossclr_batch(
    zx: &EmbeddingBatch,
    zy: &EmbeddingBatch,
    in_x: &EmbeddingBatch,
    in_y: &EmbeddingBatch,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let n = check_paired(zx, zy)?;
    if in_x.n() != n || in_y.n() != n {
        return Err(Error::DimensionMismatch(
            "input batches must match projected batch size".into(),
        ));
    }
    let conn_x = connectivity(in_x, in_x, true)?;
    let conn_y = connectivity(in_y, in_y, true)?;
    crossclr_batch_inner(zx, zy, &conn_x, &conn_y, cfg, None, None)
}

fn crossclr_batch_inner(
    zx: &EmbeddingBatch,
    zy: &EmbeddingBatch,
    conn_x: &[f64],
    conn_y: &[f64],
    cfg: &LossConfig,
    extra_x: Option<(Vec<Vec<usize>>, f64)>,
    extra_y: Option<(Vec<Vec<usize>>, f64)>,
) -> Result<LossOutput> {
    let (mask_x, weights_x) =
        masks_and_weights(conn_x, cfg, cfg.pruning_enabled, cfg.weighting_enabled)?;
    let (mask_y, weights_y) =
        masks_and_weights(conn_y, cfg, cfg.pruning_enabled, cfg.weighting_enabled)?;

    let lambda = cfg.effective_lambda();
    let intra = |unit_src: &EmbeddingBatch, mask: &[bool]| -> Result<Option<IntraSpec>> {
        if lambda <= 0.0 {
            return Ok(None);
        }
        let (unit, _) = normalize_rows(unit_src.data())?;
        Ok(Some(IntraSpec {
            keys: unit,
            influential: mask.to_vec(),
            self_offset: Some(0),
            with_grad: true,
        }))
    };

    let side_x = SideSpec {
        inter_influential: mask_x.clone(),
        intra: intra(zx, &mask_x)?,
        weights: weights_x,
        extra_pos: extra_x,
    };
    let side_y = SideSpec {
        inter_influential: mask_y.clone(),
        intra: intra(zy, &mask_y)?,
        weights: weights_y,
        extra_pos: extra_y,
    };
    assemble(zx, zy, side_x, side_y, cfg, lambda)
}

/// CrossCLR with queue-wide intra-modality negatives and queue-based
/// connectivity. The queue must already contain the current batch as its
/// newest entries (enqueue-first contract); queued keys are projected through
/// the current encoders but treated as constants.
#[allow(clippy::too_many_arguments)]
pub fn crossclr_queue(
    zx: &EmbeddingBatch,
    zy: &EmbeddingBatch,
    in_x: &EmbeddingBatch,
    in_y: &EmbeddingBatch,
    queue: &MemoryQueue,
    enc_x: &dyn Projector,
    enc_y: &dyn Projector,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    let n = check_paired(zx, zy)?;
    if in_x.n() != n || in_y.n() != n {
        return Err(Error::DimensionMismatch(
            "input batches must match projected batch size".into(),
        ));
    }
    let (qx, qy) = queue.snapshot()?;
    let q = qx.n();
    if q < n {
        return Err(Error::QueueContract(format!(
            "queue holds {q} samples but the batch has {n}; enqueue the batch first"
        )));
    }
    let offset = q - n;
    for i in 0..n {
        if qx.row(offset + i) != in_x.row(i) || qy.row(offset + i) != in_y.row(i) {
            return Err(Error::QueueContract(
                "queue tail does not match the current batch; enqueue the batch first".into(),
            ));
        }
    }

    // queue-wide connectivity with slot-identity self-exclusion; the batch
    // rows are the queue tail, so their scores are a suffix slice
    let conn_qx = connectivity(&qx, &qx, true)?;
    let conn_qy = connectivity(&qy, &qy, true)?;
    let alpha_x = conn_qx[offset..].to_vec();
    let alpha_y = conn_qy[offset..].to_vec();

    // cold start: pruning and weighting stay off until the queue holds at
    // least two batches worth of samples
    let warm = q >= 2 * n;
    let pruning = cfg.pruning_enabled && warm;
    let weighting = cfg.weighting_enabled && warm;

    let (mask_inter_x, weights_x) = masks_and_weights(&alpha_x, cfg, pruning, weighting)?;
    let (mask_inter_y, weights_y) = masks_and_weights(&alpha_y, cfg, pruning, weighting)?;
    let (mask_queue_x, _) = masks_and_weights(&conn_qx, cfg, pruning, false)?;
    let (mask_queue_y, _) = masks_and_weights(&conn_qy, cfg, pruning, false)?;

    let lambda = cfg.effective_lambda();
    let intra = |proj: Result<EmbeddingBatch>, mask: Vec<bool>| -> Result<Option<IntraSpec>> {
        if lambda <= 0.0 {
            return Ok(None);
        }
        let (unit, _) = normalize_rows(proj?.data())?;
        Ok(Some(IntraSpec {
            keys: unit,
            influential: mask,
            self_offset: Some(offset),
            with_grad: false,
        }))
    };

    let side_x = SideSpec {
        inter_influential: mask_inter_x,
        intra: intra(enc_x.project(&qx), mask_queue_x)?,
        weights: weights_x,
        extra_pos: None,
    };
    let side_y = SideSpec {
        inter_influential: mask_inter_y,
        intra: intra(enc_y.project(&qy), mask_queue_y)?,
        weights: weights_y,
        extra_pos: None,
    };
    assemble(zx, zy, side_x, side_y, cfg, lambda)
}

/// CrossCLR with multiple positives: the top-K influential samples most
/// similar to the anchor (in input space) join the numerator scaled by beta.
pub fn crossclr_multipos(
    zx: &EmbeddingBatch,
    zy: &EmbeddingBatch,
    in_x: &EmbeddingBatch,
    in_y: &EmbeddingBatch,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    if cfg.beta == 0.0 {
        return crossclr_batch(zx, zy, in_x, in_y, cfg);
    }
    let n = check_paired(zx, zy)?;
    if in_x.n() != n || in_y.n() != n {
        return Err(Error::DimensionMismatch(
            "input batches must match projected batch size".into(),
        ));
    }
    if cfg.top_k == 0 {
        return Err(Error::ConfigParse(
            "multiple positives need top_k >= 1 when beta > 0".into(),
        ));
    }
    let conn_x = connectivity(in_x, in_x, true)?;
    let conn_y = connectivity(in_y, in_y, true)?;
    let infl_x = influential_mask(&conn_x, cfg.gamma, cfg.threshold_mode)?;
    let infl_y = influential_mask(&conn_y, cfg.gamma, cfg.threshold_mode)?;

    // P_y indices come from the influential x set (the samples whose pairs
    // were pruned from the x-anchors' inter negatives), ranked by input-space
    // similarity to the anchor; symmetrically for P_x.
    let select = |infl: &[bool], inputs: &EmbeddingBatch| -> Result<Vec<Vec<usize>>> {
        let available = infl.iter().filter(|&&m| m).count();
        if cfg.top_k > available {
            return Err(Error::KExceedsInfluentialSet {
                k: cfg.top_k,
                available,
            });
        }
        let sim = cosine_similarity_matrix(inputs, inputs)?;
        let mut out = Vec::with_capacity(infl.len());
        for i in 0..infl.len() {
            let mut cands: Vec<usize> = (0..infl.len()).filter(|&k| infl[k] && k != i).collect();
            cands.sort_by(|&a, &b| {
                sim.scores[[i, b]]
                    .total_cmp(&sim.scores[[i, a]])
                    .then(a.cmp(&b))
            });
            cands.truncate(cfg.top_k);
            out.push(cands);
        }
        Ok(out)
    };
    let extra_x = Some((select(&infl_x, in_x)?, cfg.beta));
    let extra_y = Some((select(&infl_y, in_y)?, cfg.beta));
    crossclr_batch_inner(zx, zy, &conn_x, &conn_y, cfg, extra_x, extra_y)
}
