//! Reference contrastive objectives used for comparison runs: NT-Xent with
//! both-modality negatives, the symmetric InfoNCE used by CLIP-style models,
//! and a bidirectional max-margin ranking loss.

use ndarray::Array2;

use crate::embedding::{dot, EmbeddingBatch};
use crate::error::{Error, Result};

use super::kernel::{contrastive_side, normalize_backward, normalize_rows, IntraPlan, SidePlan};
use super::{check_paired, Diagnostics, LossOutput};

fn check_tau(tau: f64) -> Result<()> {
    if tau <= 0.0 {
        return Err(Error::NonPositiveTemperature(tau));
    }
    Ok(())
}

fn softmax_pair(
    zx: &EmbeddingBatch,
    zy: &EmbeddingBatch,
    tau: f64,
    lambda: f64,
    with_intra: bool,
) -> Result<LossOutput> {
    check_tau(tau)?;
    let n = check_paired(zx, zy)?;
    let (ux, norms_x) = normalize_rows(zx.data())?;
    let (uy, norms_y) = normalize_rows(zy.data())?;
    let keep = vec![true; n];
    let scales = vec![0.5 / n as f64; n];

    let side = |anchors: &Array2<f64>, cross: &Array2<f64>| {
        let intra = if with_intra {
            Some(IntraPlan {
                keys: anchors,
                keep: &keep,
                self_offset: Some(0),
                with_grad: true,
            })
        } else {
            None
        };
        contrastive_side(&SidePlan {
            anchors,
            cross,
            inter_keep: &keep,
            intra,
            extra_pos: None,
            tau,
            lambda,
            anchor_scale: &scales,
        })
    };

    let res_x = side(&ux, &uy)?;
    let res_y = side(&uy, &ux)?;

    let mut value = 0.0;
    for l in res_x.per_anchor.iter().chain(&res_y.per_anchor) {
        value += 0.5 / n as f64 * l;
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

    Ok(LossOutput {
        value,
        grad_zx: normalize_backward(&ux, &norms_x, &grad_ux),
        grad_zy: normalize_backward(&uy, &norms_y, &grad_uy),
        diagnostics: Diagnostics {
            n_negatives_x: res_x.n_negatives,
            n_negatives_y: res_y.n_negatives,
            per_anchor_x: res_x.per_anchor,
            per_anchor_y: res_y.per_anchor,
            ..Diagnostics::default()
        },
    })
}

/// NT-Xent over the union batch: each anchor is contrasted against its
/// cross-modal positive and all 2N - 2 other samples of both modalities.
pub fn ntxent(zx: &EmbeddingBatch, zy: &EmbeddingBatch, tau: f64) -> Result<LossOutput> {
    softmax_pair(zx, zy, tau, 1.0, true)
}

/// Symmetric InfoNCE: cross-modal negatives only, averaged over both
/// directions.
pub fn clip_symmetric(zx: &EmbeddingBatch, zy: &EmbeddingBatch, tau: f64) -> Result<LossOutput> {
    softmax_pair(zx, zy, tau, 0.0, false)
}

/// Bidirectional hinge ranking loss on cosine scores, averaged over the
/// 2N(N - 1) ordered hinge terms.
pub fn max_margin(zx: &EmbeddingBatch, zy: &EmbeddingBatch, margin: f64) -> Result<LossOutput> {
    let n = check_paired(zx, zy)?;
    let (ux, norms_x) = normalize_rows(zx.data())?;
    let (uy, norms_y) = normalize_rows(zy.data())?;
    let d = ux.ncols();

    let mut s: Array2<f64> = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            s[[i, j]] = dot(ux.row(i), uy.row(j));
        }
    }

    let scale = 1.0 / (2.0 * n as f64 * (n - 1) as f64);
    let mut value = 0.0;
    // ds[i][j] accumulates dL/ds_ij
    let mut ds: Array2<f64> = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let h_row = margin - s[[i, i]] + s[[i, j]];
            if h_row > 0.0 {
                value += h_row;
                ds[[i, j]] += scale;
                ds[[i, i]] -= scale;
            }
            let h_col = margin - s[[j, j]] + s[[i, j]];
            if h_col > 0.0 {
                value += h_col;
                ds[[i, j]] += scale;
                ds[[j, j]] -= scale;
            }
        }
    }
    value *= scale;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss);
    }

    let mut grad_ux: Array2<f64> = Array2::zeros((n, d));
    let mut grad_uy: Array2<f64> = Array2::zeros((n, d));
    for i in 0..n {
        for j in 0..n {
            let g = ds[[i, j]];
            if g == 0.0 {
                continue;
            }
            for k in 0..d {
                grad_ux[[i, k]] += g * uy[[j, k]];
                grad_uy[[j, k]] += g * ux[[i, k]];
            }
        }
    }

    Ok(LossOutput {
        value,
        grad_zx: normalize_backward(&ux, &norms_x, &grad_ux),
        grad_zy: normalize_backward(&uy, &norms_y, &grad_uy),
        diagnostics: Diagnostics::default(),
    })
}
