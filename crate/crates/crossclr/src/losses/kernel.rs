//! Shared softmax-contrastive kernel used by every InfoNCE-style loss.
//!
//! One "side" is a set of anchors contrasted against a positive per anchor,
//! an optional pruned inter-modality negative set, an optional pruned
//! intra-modality negative set, and optional extra numerator positives.
//! Per-anchor log-sum-exp terms use the max-subtraction trick; gradients are
//! exact analytic derivatives accumulated with a per-anchor scale factor.

use ndarray::Array2;

use crate::embedding::{dot, row_norm};
use crate::error::{Error, Result};

pub(crate) struct IntraPlan<'a> {
    /// Normalized same-modality negative keys, M x D.
    pub keys: &'a Array2<f64>,
    /// keep[m]: slot m usable as a negative (not influential).
    pub keep: &'a [bool],
    /// Anchor i occupies key slot self_offset + i; that slot is skipped.
    pub self_offset: Option<usize>,
    /// Whether gradients are accumulated into the keys (false for queued
    /// stop-gradient keys).
    pub with_grad: bool,
}

pub(crate) struct ExtraPositives<'a> {
    /// Per-anchor indices into the cross batch added to the numerator.
    pub indices: &'a [Vec<usize>],
    pub beta: f64,
}

pub(crate) struct SidePlan<'a> {
    /// Normalized anchor embeddings, N x D.
    pub anchors: &'a Array2<f64>,
    /// Normalized other-modality embeddings, N x D; row i is anchor i's
    /// positive, rows j != i its inter-modality negative candidates.
    pub cross: &'a Array2<f64>,
    /// inter_keep[j]: column j usable as an inter negative (j != i implied).
    pub inter_keep: &'a [bool],
    pub intra: Option<IntraPlan<'a>>,
    pub extra_pos: Option<ExtraPositives<'a>>,
    pub tau: f64,
    pub lambda: f64,
    /// Multiplies anchor i's contribution to the total value and gradients.
    pub anchor_scale: &'a [f64],
}

pub(crate) struct SideResult {
    /// Unscaled per-anchor loss terms.
    pub per_anchor: Vec<f64>,
    pub grad_anchors: Array2<f64>,
    pub grad_cross: Array2<f64>,
    pub grad_keys: Option<Array2<f64>>,
    pub n_negatives: Vec<usize>,
}

#[derive(Clone, Copy)]
enum Target {
    Cross(usize),
    Key(usize),
}

#[derive(Default)]
struct Terms {
    logits: Vec<f64>,
    den_coeff: Vec<f64>,
    num_coeff: Vec<f64>,
    targets: Vec<Target>,
    /// maps a cross column to its term slot, for merging extra positives
    cross_slot: Vec<Option<usize>>,
}

impl Terms {
    fn reset(&mut self, n: usize) {
        self.logits.clear();
        self.den_coeff.clear();
        self.num_coeff.clear();
        self.targets.clear();
        self.cross_slot.clear();
        self.cross_slot.resize(n, None);
    }

    fn push(&mut self, logit: f64, den: f64, num: f64, tgt: Target) {
        if let Target::Cross(j) = tgt {
            self.cross_slot[j] = Some(self.logits.len());
        }
        self.logits.push(logit);
        self.den_coeff.push(den);
        self.num_coeff.push(num);
        self.targets.push(tgt);
    }
}

impl Default for Target {
    fn default() -> Self {
        Target::Cross(0)
    }
}

pub(crate) fn contrastive_side(plan: &SidePlan<'_>) -> Result<SideResult> {
    let n = plan.anchors.nrows();
    let d = plan.anchors.ncols();
    let mut per_anchor = Vec::with_capacity(n);
    let mut n_negatives = Vec::with_capacity(n);
    let mut grad_anchors = Array2::zeros((n, d));
    let mut grad_cross = Array2::zeros((n, d));
    let mut grad_keys = plan
        .intra
        .as_ref()
        .filter(|p| p.with_grad)
        .map(|p| Array2::zeros((p.keys.nrows(), d)));

    let mut terms = Terms::default();

    for i in 0..n {
        terms.reset(n);
        let anchor = plan.anchors.row(i);

        terms.push(
            dot(anchor, plan.cross.row(i)) / plan.tau,
            1.0,
            1.0,
            Target::Cross(i),
        );

        let mut n_inter = 0usize;
        for j in 0..n {
            if j == i || !plan.inter_keep[j] {
                continue;
            }
            terms.push(
                dot(anchor, plan.cross.row(j)) / plan.tau,
                1.0,
                0.0,
                Target::Cross(j),
            );
            n_inter += 1;
        }

        let mut n_intra = 0usize;
        if plan.lambda > 0.0 {
            if let Some(intra) = &plan.intra {
                let self_slot = intra.self_offset.map(|o| o + i);
                for m in 0..intra.keys.nrows() {
                    if Some(m) == self_slot || !intra.keep[m] {
                        continue;
                    }
                    terms.push(
                        dot(anchor, intra.keys.row(m)) / plan.tau,
                        plan.lambda,
                        0.0,
                        Target::Key(m),
                    );
                    n_intra += 1;
                }
            }
        }

        if n_inter + n_intra == 0 {
            return Err(Error::InsufficientNegatives(i));
        }

        if let Some(extra) = &plan.extra_pos {
            for &k in &extra.indices[i] {
                if k == i {
                    continue;
                }
                match terms.cross_slot[k] {
                    Some(slot) => terms.num_coeff[slot] += extra.beta,
                    None => terms.push(
                        dot(anchor, plan.cross.row(k)) / plan.tau,
                        0.0,
                        extra.beta,
                        Target::Cross(k),
                    ),
                }
            }
        }

        let max_logit = terms
            .logits
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let mut den = 0.0;
        let mut num = 0.0;
        for ((&t, &dc), &nc) in terms
            .logits
            .iter()
            .zip(&terms.den_coeff)
            .zip(&terms.num_coeff)
        {
            let e = (t - max_logit).exp();
            den += dc * e;
            num += nc * e;
        }
        let loss_i = den.ln() - num.ln();
        if !loss_i.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        per_anchor.push(loss_i);
        n_negatives.push(n_inter + n_intra);

        let scale = plan.anchor_scale[i];
        if scale != 0.0 {
            for (slot, &t) in terms.logits.iter().enumerate() {
                let e = (t - max_logit).exp();
                let g = (terms.den_coeff[slot] * e / den - terms.num_coeff[slot] * e / num)
                    * scale
                    / plan.tau;
                if g == 0.0 {
                    continue;
                }
                match terms.targets[slot] {
                    Target::Cross(j) => {
                        let other = plan.cross.row(j);
                        let mut ga = grad_anchors.row_mut(i);
                        for k in 0..d {
                            ga[k] += g * other[k];
                        }
                        let mut gc = grad_cross.row_mut(j);
                        for k in 0..d {
                            gc[k] += g * anchor[k];
                        }
                    }
                    Target::Key(m) => {
                        let intra = plan.intra.as_ref().unwrap();
                        let other = intra.keys.row(m);
                        let mut ga = grad_anchors.row_mut(i);
                        for k in 0..d {
                            ga[k] += g * other[k];
                        }
                        if let Some(gk) = grad_keys.as_mut() {
                            let mut row = gk.row_mut(m);
                            for k in 0..d {
                                row[k] += g * anchor[k];
                            }
                        }
                    }
                }
            }
        }
    }

    Ok(SideResult {
        per_anchor,
        grad_anchors,
        grad_cross,
        grad_keys,
        n_negatives,
    })
}

/// Row-normalizes a raw matrix, returning the unit rows and the original
/// norms needed for the backward pass.
pub(crate) fn normalize_rows(raw: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut unit = raw.clone();
    let mut norms = Vec::with_capacity(raw.nrows());
    for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
        let norm = row_norm(row.view());
        if norm <= 1e-12 {
            return Err(Error::ZeroVectorRow(i));
        }
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    Ok((unit, norms))
}

/// Pulls a gradient w.r.t. unit rows back to the raw rows:
/// g_raw = (g - (g . z) z) / ||v||.
pub(crate) fn normalize_backward(
    unit: &Array2<f64>,
    norms: &[f64],
    grad_unit: &Array2<f64>,
) -> Array2<f64> {
    let mut out = Array2::zeros(grad_unit.raw_dim());
    for i in 0..unit.nrows() {
        let z = unit.row(i);
        let g = grad_unit.row(i);
        let proj = dot(g, z);
        let mut row = out.row_mut(i);
        for k in 0..z.len() {
            row[k] = (g[k] - proj * z[k]) / norms[i];
        }
    }
    out
}
