//! Acceptance gate: one integration test per release criterion. Every test
//! prints a single `criterion N (...): PASS/FAIL` line (visible with
//! `--nocapture`) and fails the build when its criterion is not met.
//!
//! Oracles here are written independently of the library internals: naive
//! double-loop connectivity, single-loop loss recomputation without the
//! max-subtraction trick, a full-sort ranking oracle, and a plain-Vec queue
//! model.

use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crossclr::data::{generate_synthetic, Split, SplitRanges};
use crossclr::embedding::{cosine_similarity_matrix, EmbeddingBatch};
use crossclr::error::Error;
use crossclr::eval::{evaluate_retrieval, similarity_histograms};
use crossclr::influence::{influential_mask, sample_weights, ThresholdMode, WeightNorm};
use crossclr::losses::{
    clip_symmetric, crossclr_batch, crossclr_multipos, crossclr_queue, finite_diff_check,
    max_margin, ntxent, GradCheckConfig, IdentityProjector, LossConfig, LossOutput, Projector,
    Reduction,
};
use crossclr::queue::MemoryQueue;
use crossclr::trainer::{fit, LossKind, TrainConfig};

fn verdict(num: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "criterion {num} ({name}): {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {num} ({name}) failed: {detail}");
}

// ---------------------------------------------------------------------------
// shared fixtures

/// Inputs with a tight 3-row cluster plus spread-out loners; the cluster is
/// influential under max-relative gamma = 0.9 while every anchor keeps at
/// least one unpruned negative. Requires d >= n so the loner one-hots differ.
fn clustered_inputs(rng: &mut ChaCha20Rng, n: usize, d: usize) -> Array2<f64> {
    assert!(n >= 4 && d >= n);
    let base = 1.0 / (d as f64).sqrt();
    Array2::from_shape_fn((n, d), |(i, j)| {
        if i < 3 {
            base + rng.gen_range(-0.01..0.01)
        } else {
            0.2 + if j == i { 1.0 } else { 0.0 }
        }
    })
}

fn random_matrix(rng: &mut ChaCha20Rng, n: usize, d: usize, lo: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.gen_range(lo..1.0))
}

fn batch(m: &Array2<f64>) -> EmbeddingBatch {
    EmbeddingBatch::new(m.clone()).unwrap()
}

// ---------------------------------------------------------------------------
// independent oracle: naive loss recomputation

mod oracle {
    use super::*;

    pub fn unit(rows: &Array2<f64>) -> Vec<Vec<f64>> {
        rows.rows()
            .into_iter()
            .map(|r| {
                let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / norm).collect()
            })
            .collect()
    }

    pub fn dotv(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    /// Mean pairwise cosine to the other rows, double loop.
    pub fn conn_excl(rows: &Array2<f64>) -> Vec<f64> {
        let u = unit(rows);
        let n = u.len();
        (0..n)
            .map(|i| {
                let s: f64 = (0..n).filter(|&j| j != i).map(|j| dotv(&u[i], &u[j])).sum();
                s / (n - 1) as f64
            })
            .collect()
    }

    fn mask_of(c: &[f64], cfg: &LossConfig) -> Result<Vec<bool>, &'static str> {
        match cfg.threshold_mode {
            ThresholdMode::Absolute => Ok(c.iter().map(|&v| v >= cfg.gamma).collect()),
            ThresholdMode::MaxRelative => {
                let max = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if max <= 1e-12 {
                    return Err("degenerate");
                }
                Ok(c.iter().map(|&v| v / max >= cfg.gamma).collect())
            }
        }
    }

    fn weights_of(c: &[f64], cfg: &LossConfig) -> Result<Vec<f64>, &'static str> {
        let normed: Vec<f64> = match cfg.weight_norm {
            WeightNorm::None => c.to_vec(),
            WeightNorm::SumToOne => {
                let sum: f64 = c.iter().sum();
                if sum <= 1e-12 {
                    return Err("degenerate");
                }
                c.iter().map(|v| v / sum).collect()
            }
        };
        let mut w = Vec::new();
        for v in normed {
            let e = v / cfg.kappa;
            if e > 700.0 {
                return Err("overflow");
            }
            w.push(e.exp());
        }
        Ok(w)
    }

    struct Side {
        anchors: Vec<Vec<f64>>,
        cross: Vec<Vec<f64>>,
        inter_mask: Vec<bool>,
        weights: Vec<f64>,
        /// (keys, key mask, self offset)
        intra: Option<(Vec<Vec<f64>>, Vec<bool>, usize)>,
        extra: Option<Vec<Vec<usize>>>,
    }

    fn side_losses(s: &Side, cfg: &LossConfig, lambda: f64) -> Result<Vec<f64>, &'static str> {
        let n = s.anchors.len();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let a = &s.anchors[i];
            let e_pos = (dotv(a, &s.cross[i]) / cfg.tau).exp();
            let mut den = e_pos;
            let mut num = e_pos;
            let mut negs = 0usize;
            for j in 0..n {
                if j == i || s.inter_mask[j] {
                    continue;
                }
                den += (dotv(a, &s.cross[j]) / cfg.tau).exp();
                negs += 1;
            }
            if lambda > 0.0 {
                if let Some((keys, kmask, off)) = &s.intra {
                    for (m, key) in keys.iter().enumerate() {
                        if m == off + i || kmask[m] {
                            continue;
                        }
                        den += lambda * (dotv(a, key) / cfg.tau).exp();
                        negs += 1;
                    }
                }
            }
            if negs == 0 {
                return Err("insufficient");
            }
            if let Some(extra) = &s.extra {
                for &k in &extra[i] {
                    if k != i {
                        num += cfg.beta * (dotv(a, &s.cross[k]) / cfg.tau).exp();
                    }
                }
            }
            out.push(den.ln() - num.ln());
        }
        Ok(out)
    }

    fn reduce(losses_x: &[f64], losses_y: &[f64], wx: &[f64], wy: &[f64], red: Reduction) -> f64 {
        let denom = |w: &[f64]| match red {
            Reduction::WeightedMean => w.iter().sum::<f64>(),
            Reduction::Expectation => w.len() as f64,
        };
        let dx = denom(wx);
        let dy = denom(wy);
        let mut v = 0.0;
        for i in 0..losses_x.len() {
            v += 0.5 * wx[i] / dx * losses_x[i];
        }
        for i in 0..losses_y.len() {
            v += 0.5 * wy[i] / dy * losses_y[i];
        }
        v
    }

    /// Recomputes the cross-modal loss value with single loops. `queue` holds
    /// the full queue contents (current batch = tail); `multipos` adds the
    /// top-k influential extra positives.
    pub fn crossclr_value(
        zx: &Array2<f64>,
        zy: &Array2<f64>,
        in_x: &Array2<f64>,
        in_y: &Array2<f64>,
        queue: Option<(&Array2<f64>, &Array2<f64>)>,
        multipos: bool,
        cfg: &LossConfig,
    ) -> Result<f64, &'static str> {
        let n = zx.nrows();
        let ax = unit(zx);
        let ay = unit(zy);
        let lambda = if cfg.intra_enabled { cfg.lambda_intra } else { 0.0 };

        let select = |inputs: &Array2<f64>| -> Result<Vec<Vec<usize>>, &'static str> {
            let c = conn_excl(inputs);
            let infl = mask_of(&c, cfg)?;
            let available = infl.iter().filter(|&&m| m).count();
            if cfg.top_k > available {
                return Err("kexceeds");
            }
            let u = unit(inputs);
            let mut out = Vec::with_capacity(n);
            for i in 0..n {
                let mut cands: Vec<usize> = (0..n).filter(|&k| infl[k] && k != i).collect();
                cands.sort_by(|&p, &q| {
                    dotv(&u[i], &u[q])
                        .total_cmp(&dotv(&u[i], &u[p]))
                        .then(p.cmp(&q))
                });
                cands.truncate(cfg.top_k);
                out.push(cands);
            }
            Ok(out)
        };

        let (side_x, side_y) = match queue {
            None => {
                let cx = conn_excl(in_x);
                let cy = conn_excl(in_y);
                let (extra_x, extra_y) = if multipos && cfg.beta != 0.0 {
                    (Some(select(in_x)?), Some(select(in_y)?))
                } else {
                    (None, None)
                };
                let build = |c: &[f64],
                             anchors: &[Vec<f64>],
                             cross: &[Vec<f64>],
                             extra: Option<Vec<Vec<usize>>>|
                 -> Result<Side, &'static str> {
                    let mask = if cfg.pruning_enabled {
                        mask_of(c, cfg)?
                    } else {
                        vec![false; n]
                    };
                    let weights = if cfg.weighting_enabled {
                        weights_of(c, cfg)?
                    } else {
                        vec![1.0; n]
                    };
                    Ok(Side {
                        anchors: anchors.to_vec(),
                        cross: cross.to_vec(),
                        intra: (lambda > 0.0).then(|| (anchors.to_vec(), mask.clone(), 0)),
                        inter_mask: mask,
                        weights,
                        extra,
                    })
                };
                (build(&cx, &ax, &ay, extra_x)?, build(&cy, &ay, &ax, extra_y)?)
            }
            Some((qx, qy)) => {
                let q = qx.nrows();
                let offset = q - n;
                let conn_qx = conn_excl(qx);
                let conn_qy = conn_excl(qy);
                let warm = q >= 2 * n;
                let pruning = cfg.pruning_enabled && warm;
                let weighting = cfg.weighting_enabled && warm;
                let build = |conn_q: &[f64],
                             qrows: &Array2<f64>,
                             anchors: &[Vec<f64>],
                             cross: &[Vec<f64>]|
                 -> Result<Side, &'static str> {
                    let alpha = &conn_q[offset..];
                    let mask = if pruning {
                        mask_of(alpha, cfg)?
                    } else {
                        vec![false; n]
                    };
                    let weights = if weighting {
                        weights_of(alpha, cfg)?
                    } else {
                        vec![1.0; n]
                    };
                    let kmask = if pruning {
                        mask_of(conn_q, cfg)?
                    } else {
                        vec![false; q]
                    };
                    Ok(Side {
                        anchors: anchors.to_vec(),
                        cross: cross.to_vec(),
                        inter_mask: mask,
                        weights,
                        intra: (lambda > 0.0).then(|| (unit(qrows), kmask, offset)),
                        extra: None,
                    })
                };
                (
                    build(&conn_qx, qx, &ax, &ay)?,
                    build(&conn_qy, qy, &ay, &ax)?,
                )
            }
        };

        let lx = side_losses(&side_x, cfg, lambda)?;
        let ly = side_losses(&side_y, cfg, lambda)?;
        Ok(reduce(&lx, &ly, &side_x.weights, &side_y.weights, cfg.reduction))
    }
}

// ---------------------------------------------------------------------------
// criterion 1: gradient exactness across seeded configurations

#[test]
fn criterion_01_gradient_exactness() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_case = String::new();
    let mut total_checked = 0usize;

    for i in 0..100u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(9000 + i);
        let n = rng.gen_range(4..=16usize);
        let d_in = (n + rng.gen_range(0..=8usize)).clamp(4, 32);
        let kind = i % 6;
        // queued intra keys go through the identity projector, so the joint
        // space must coincide with the input space there
        let dj = if kind == 1 { d_in } else { rng.gen_range(4..=32usize) };
        let flags = (i % 8) as u8;
        let cfg = LossConfig {
            tau: 0.3,
            kappa: 0.5,
            weight_norm: WeightNorm::None,
            pruning_enabled: flags & 1 != 0,
            weighting_enabled: flags & 2 != 0,
            intra_enabled: flags & 4 != 0,
            ..LossConfig::default()
        };
        let in_x = clustered_inputs(&mut rng, n, d_in);
        let in_y = clustered_inputs(&mut rng, n, d_in);
        let zx = random_matrix(&mut rng, n, dj, -1.0);
        let zy = random_matrix(&mut rng, n, dj, -1.0);
        let params = vec![zx.clone(), zy.clone()];

        let name;
        let out: LossOutput;
        let mut f: Box<dyn FnMut(&[Array2<f64>]) -> crossclr::Result<f64>>;
        match kind {
            0 => {
                name = "crossclr_batch";
                let bx = batch(&in_x);
                let by = batch(&in_y);
                out = crossclr_batch(&batch(&zx), &batch(&zy), &bx, &by, &cfg).unwrap();
                let c = cfg.clone();
                f = Box::new(move |p| {
                    Ok(crossclr_batch(&batch(&p[0]), &batch(&p[1]), &bx, &by, &c)?.value)
                });
            }
            1 => {
                name = "crossclr_queue";
                let old_x = clustered_inputs(&mut rng, n, d_in);
                let old_y = clustered_inputs(&mut rng, n, d_in);
                let mut q = MemoryQueue::new(4 * n, d_in, d_in);
                q.enqueue(&batch(&old_x), &batch(&old_y)).unwrap();
                q.enqueue(&batch(&in_x), &batch(&in_y)).unwrap();
                let bx = batch(&in_x);
                let by = batch(&in_y);
                out = crossclr_queue(
                    &batch(&zx),
                    &batch(&zy),
                    &bx,
                    &by,
                    &q,
                    &IdentityProjector,
                    &IdentityProjector,
                    &cfg,
                )
                .unwrap();
                let c = cfg.clone();
                f = Box::new(move |p| {
                    Ok(crossclr_queue(
                        &batch(&p[0]),
                        &batch(&p[1]),
                        &bx,
                        &by,
                        &q,
                        &IdentityProjector,
                        &IdentityProjector,
                        &c,
                    )?
                    .value)
                });
            }
            2 => {
                name = "crossclr_multipos";
                let c = LossConfig {
                    beta: 0.15,
                    top_k: 1,
                    ..cfg.clone()
                };
                let bx = batch(&in_x);
                let by = batch(&in_y);
                out = crossclr_multipos(&batch(&zx), &batch(&zy), &bx, &by, &c).unwrap();
                f = Box::new(move |p| {
                    Ok(crossclr_multipos(&batch(&p[0]), &batch(&p[1]), &bx, &by, &c)?.value)
                });
            }
            3 => {
                name = "ntxent";
                out = ntxent(&batch(&zx), &batch(&zy), 0.3).unwrap();
                f = Box::new(move |p| Ok(ntxent(&batch(&p[0]), &batch(&p[1]), 0.3)?.value));
            }
            4 => {
                name = "clip_symmetric";
                out = clip_symmetric(&batch(&zx), &batch(&zy), 0.3).unwrap();
                f = Box::new(move |p| {
                    Ok(clip_symmetric(&batch(&p[0]), &batch(&p[1]), 0.3)?.value)
                });
            }
            _ => {
                name = "max_margin";
                out = max_margin(&batch(&zx), &batch(&zy), 0.2).unwrap();
                f = Box::new(move |p| Ok(max_margin(&batch(&p[0]), &batch(&p[1]), 0.2)?.value));
            }
        }

        let grads = vec![out.grad_zx.clone(), out.grad_zy.clone()];
        let gc = GradCheckConfig {
            step: 1e-5,
            max_coords: 4096,
            seed: 9000 + i,
            tolerance: 1e-4,
        };
        let report = finite_diff_check(&params, &grads, &mut *f, &gc).unwrap();
        total_checked += report.checked;
        if report.max_rel_err > worst {
            worst = report.max_rel_err;
            worst_case = format!("{name} (config {i}, n={n})");
        }
    }

    let elapsed = start.elapsed();
    let pass = worst < 1e-4 && elapsed < Duration::from_secs(60);
    verdict(
        1,
        "gradient exactness",
        pass,
        &format!(
            "100 configs, {total_checked} coords, max rel err {worst:.3e} (worst: {worst_case}), {elapsed:.1?}",
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 2: scalar-oracle equivalence

#[test]
fn criterion_02_scalar_oracle_equivalence() {
    let mut max_diff = 0.0f64;
    let mut compared = 0usize;
    let mut trials = 0usize;

    for seed in 0..50u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(40_000 + seed);
        let n = rng.gen_range(2..=8usize);
        let d_in = rng.gen_range(3..=10usize);
        let dj = rng.gen_range(3..=8usize);
        let in_x = random_matrix(&mut rng, n, d_in, 0.05);
        let in_y = random_matrix(&mut rng, n, d_in, 0.05);
        let zx = random_matrix(&mut rng, n, dj, -1.0);
        let zy = random_matrix(&mut rng, n, dj, -1.0);

        let (threshold_mode, gamma) = if rng.gen_bool(0.5) {
            (ThresholdMode::Absolute, rng.gen_range(0.3..0.95))
        } else {
            (ThresholdMode::MaxRelative, rng.gen_range(0.8..0.99))
        };
        let (weight_norm, kappa) = if rng.gen_bool(0.5) {
            (WeightNorm::SumToOne, [0.0035, 0.05][rng.gen_range(0..2)])
        } else {
            (WeightNorm::None, [0.3, 1.0][rng.gen_range(0..2)])
        };
        let cfg = LossConfig {
            tau: [0.03, 0.2, 1.0][rng.gen_range(0..3)],
            lambda_intra: [0.8, 6.5][rng.gen_range(0..2)],
            gamma,
            kappa,
            threshold_mode,
            weight_norm,
            pruning_enabled: rng.gen_bool(0.7),
            weighting_enabled: rng.gen_bool(0.7),
            intra_enabled: rng.gen_bool(0.7),
            reduction: if rng.gen_bool(0.5) {
                Reduction::WeightedMean
            } else {
                Reduction::Expectation
            },
            beta: 0.3,
            top_k: 1,
            ..LossConfig::default()
        };

        let err_tag = |e: &Error| -> &'static str {
            match e {
                Error::InsufficientNegatives(_) => "insufficient",
                Error::KExceedsInfluentialSet { .. } => "kexceeds",
                Error::DegenerateScores(_) => "degenerate",
                Error::WeightOverflow(_) => "overflow",
                other => panic!("unexpected loss error: {other}"),
            }
        };
        let mut check = |got: crossclr::Result<LossOutput>,
                         want: Result<f64, &'static str>,
                         label: &str| {
            trials += 1;
            match (got, want) {
                (Ok(out), Ok(v)) => {
                    // relative tolerance: expectation-reduced values with the
                    // preset-scale kappa weights are astronomically large
                    let diff = (out.value - v).abs() / v.abs().max(1.0);
                    if diff > max_diff {
                        max_diff = diff;
                    }
                    compared += 1;
                    assert!(
                        diff <= 1e-10,
                        "{label} seed {seed}: library {} vs oracle {v} (rel diff {diff:.3e})",
                        out.value
                    );
                }
                (Err(e), Err(tag)) => {
                    assert_eq!(err_tag(&e), tag, "{label} seed {seed}: error kinds differ");
                }
                (Ok(out), Err(tag)) => {
                    panic!("{label} seed {seed}: library Ok({}) but oracle {tag}", out.value)
                }
                (Err(e), Ok(v)) => {
                    panic!("{label} seed {seed}: library {e} but oracle Ok({v})")
                }
            }
        };

        // batch mode (multipos with beta = 0.3 exercises the same path plus
        // the extra positives)
        let batch_cfg = LossConfig { beta: 0.0, ..cfg.clone() };
        check(
            crossclr_batch(&batch(&zx), &batch(&zy), &batch(&in_x), &batch(&in_y), &batch_cfg),
            oracle::crossclr_value(&zx, &zy, &in_x, &in_y, None, false, &batch_cfg),
            "batch",
        );
        check(
            crossclr_multipos(&batch(&zx), &batch(&zy), &batch(&in_x), &batch(&in_y), &cfg),
            oracle::crossclr_value(&zx, &zy, &in_x, &in_y, None, true, &cfg),
            "multipos",
        );

        // queue mode with a random amount of history, queue size <= 32
        let extra = rng.gen_range(0..=(32 - n)) / n * n;
        let mut qx_rows = random_matrix(&mut rng, extra, d_in, 0.05);
        let mut qy_rows = random_matrix(&mut rng, extra, d_in, 0.05);
        let mut q = MemoryQueue::new(32, d_in, d_in);
        if extra > 0 {
            q.enqueue(&batch(&qx_rows), &batch(&qy_rows)).unwrap();
        }
        q.enqueue(&batch(&in_x), &batch(&in_y)).unwrap();
        let append = |top: &Array2<f64>, bottom: &Array2<f64>| -> Array2<f64> {
            let mut all = Array2::zeros((top.nrows() + bottom.nrows(), top.ncols()));
            for (i, r) in top.rows().into_iter().chain(bottom.rows()).enumerate() {
                all.row_mut(i).assign(&r);
            }
            all
        };
        qx_rows = append(&qx_rows, &in_x);
        qy_rows = append(&qy_rows, &in_y);
        // queued intra keys pass through the identity projector, so the
        // projected batch must live in the input space here
        let zxq = random_matrix(&mut rng, n, d_in, -1.0);
        let zyq = random_matrix(&mut rng, n, d_in, -1.0);
        check(
            crossclr_queue(
                &batch(&zxq),
                &batch(&zyq),
                &batch(&in_x),
                &batch(&in_y),
                &q,
                &IdentityProjector,
                &IdentityProjector,
                &batch_cfg,
            ),
            oracle::crossclr_value(
                &zxq,
                &zyq,
                &in_x,
                &in_y,
                Some((&qx_rows, &qy_rows)),
                false,
                &batch_cfg,
            ),
            "queue",
        );
    }

    let pass = compared >= 60;
    verdict(
        2,
        "scalar-oracle equivalence",
        pass,
        &format!("{compared}/{trials} value comparisons agreed, max diff {max_diff:.3e}"),
    );
}

// ---------------------------------------------------------------------------
// criterion 3: reduction identities

#[test]
fn criterion_03_reduction_identities() {
    let mut max_diff = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(50_000 + seed);
        let n = rng.gen_range(3..=8usize);
        let d = rng.gen_range(3..=8usize);
        let zx = batch(&random_matrix(&mut rng, n, d, -1.0));
        let zy = batch(&random_matrix(&mut rng, n, d, -1.0));
        let in_x = batch(&random_matrix(&mut rng, n, 6, 0.05));
        let in_y = batch(&random_matrix(&mut rng, n, 6, 0.05));

        // CrossCLR with lambda = 0 and pruning/weighting off is the symmetric
        // InfoNCE baseline
        let plain = LossConfig {
            tau: 0.4,
            intra_enabled: false,
            pruning_enabled: false,
            weighting_enabled: false,
            ..LossConfig::default()
        };
        let a = crossclr_batch(&zx, &zy, &in_x, &in_y, &plain).unwrap();
        let b = clip_symmetric(&zx, &zy, plain.tau).unwrap();
        max_diff = max_diff.max((a.value - b.value).abs());

        // beta = 0 multipos is the batch loss; random positive inputs can be
        // uniformly influential under the default max-relative gamma, so the
        // identity is checked with pruning off
        let cfg = LossConfig {
            tau: 0.4,
            pruning_enabled: false,
            ..LossConfig::default()
        };
        let c = crossclr_multipos(&zx, &zy, &in_x, &in_y, &cfg).unwrap();
        let d2 = crossclr_batch(&zx, &zy, &in_x, &in_y, &cfg).unwrap();
        max_diff = max_diff.max((c.value - d2.value).abs());

        // a queue holding exactly the batch reproduces the batch loss; the
        // cold-start rule keeps pruning/weighting off on the queue side, so
        // the identity is checked with those flags off on both
        let mut q = MemoryQueue::new(4 * n, in_x.dim(), in_y.dim());
        q.enqueue(&in_x, &in_y).unwrap();
        let full = LossConfig {
            tau: 0.4,
            pruning_enabled: false,
            weighting_enabled: false,
            ..LossConfig::default()
        };
        let enc = IdentityProjector;
        let pzx = enc.project(&in_x).unwrap();
        let pzy = enc.project(&in_y).unwrap();
        let e = crossclr_queue(&pzx, &pzy, &in_x, &in_y, &q, &enc, &enc, &full).unwrap();
        let f = crossclr_batch(&pzx, &pzy, &in_x, &in_y, &full).unwrap();
        max_diff = max_diff.max((e.value - f.value).abs());
    }
    verdict(
        3,
        "reduction identities",
        max_diff < 1e-12,
        &format!("max identity deviation {max_diff:.3e} over 10 seeds"),
    );
}

// ---------------------------------------------------------------------------
// criterion 4: influence properties

#[test]
fn criterion_04_influence_properties() {
    // mask monotone in gamma, both modes
    for seed in 0..50u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(60_000 + seed);
        let c: Vec<f64> = (0..12).map(|_| rng.gen_range(0.01..1.0)).collect();
        let lo = rng.gen_range(0.1..0.5);
        let hi = rng.gen_range(0.5..0.99);
        for mode in [ThresholdMode::Absolute, ThresholdMode::MaxRelative] {
            let loose = influential_mask(&c, lo, mode).unwrap();
            let tight = influential_mask(&c, hi, mode).unwrap();
            for (t, l) in tight.iter().zip(&loose) {
                assert!(!t || *l, "mask not monotone in gamma (seed {seed})");
            }
        }

        // weights preserve the argmax of connectivity
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0
        };
        for norm in [WeightNorm::None, WeightNorm::SumToOne] {
            let w = sample_weights(&c, 0.3, norm).unwrap();
            assert_eq!(argmax(&w), argmax(&c), "weights moved the argmax (seed {seed})");
        }
    }

    // pruning only removes denominator terms: per-anchor loss with pruning
    // <= without, on duplicated-row inputs whose masks are never total
    let mut checked_anchors = 0usize;
    for seed in 0..50u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(61_000 + seed);
        let n = 8;
        let make_inputs = |rng: &mut ChaCha20Rng| {
            // rows 0 and 1 identical => high connectivity; the rest one-hot
            let mut m = Array2::zeros((n, n));
            let dup: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..1.0)).collect();
            for j in 0..n {
                m[[0, j]] = dup[j];
                m[[1, j]] = dup[j];
            }
            for i in 2..n {
                m[[i, i]] = 1.0;
            }
            m
        };
        let in_x = batch(&make_inputs(&mut rng));
        let in_y = batch(&make_inputs(&mut rng));
        let zx = batch(&random_matrix(&mut rng, n, 5, -1.0));
        let zy = batch(&random_matrix(&mut rng, n, 5, -1.0));
        let cfg = LossConfig {
            tau: 0.3,
            gamma: 0.5,
            threshold_mode: ThresholdMode::MaxRelative,
            weighting_enabled: false,
            ..LossConfig::default()
        };
        let pruned = crossclr_batch(&zx, &zy, &in_x, &in_y, &cfg).unwrap();
        assert!(pruned.diagnostics.pruned_inter_x.iter().any(|&m| m));
        let full = crossclr_batch(
            &zx,
            &zy,
            &in_x,
            &in_y,
            &LossConfig { pruning_enabled: false, ..cfg },
        )
        .unwrap();
        for (p, f) in pruned
            .diagnostics
            .per_anchor_x
            .iter()
            .chain(&pruned.diagnostics.per_anchor_y)
            .zip(full.diagnostics.per_anchor_x.iter().chain(&full.diagnostics.per_anchor_y))
        {
            assert!(p <= &(f + 1e-12), "pruning raised a per-anchor loss (seed {seed})");
            checked_anchors += 1;
        }
    }
    verdict(
        4,
        "influence properties",
        true,
        &format!(
            "monotonicity + argmax preservation on 50 instances; pruning-shrinks on {checked_anchors} anchors"
        ),
    );
}

// ---------------------------------------------------------------------------
// criterion 5: queue semantics vs list-suffix model

#[test]
fn criterion_05_queue_semantics() {
    let capacity = 16;
    let (dx, dy) = (3, 2);
    let mut q = MemoryQueue::new(capacity, dx, dy);
    let mut model: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    let mut rng = ChaCha20Rng::seed_from_u64(70_000);

    for op in 0..1000 {
        let b = rng.gen_range(1..=3usize);
        let bx = random_matrix(&mut rng, b, dx, -1.0);
        let by = random_matrix(&mut rng, b, dy, -1.0);
        q.enqueue(&batch(&bx), &batch(&by)).unwrap();
        for i in 0..b {
            model.push((bx.row(i).to_vec(), by.row(i).to_vec()));
        }
        if model.len() > capacity {
            model.drain(..model.len() - capacity);
        }

        assert_eq!(q.len(), model.len(), "length diverged at op {op}");
        let (sx, sy) = q.snapshot().unwrap();
        for (i, (mx, my)) in model.iter().enumerate() {
            assert_eq!(sx.row(i).to_vec(), *mx, "x row {i} diverged at op {op}");
            assert_eq!(sy.row(i).to_vec(), *my, "y row {i} diverged at op {op}");
        }
    }
    verdict(5, "queue semantics", true, "1000 enqueue ops match the list-suffix model exactly");
}

// ---------------------------------------------------------------------------
// criterion 6: retrieval metrics vs full-sort oracle

#[test]
fn criterion_06_retrieval_oracle() {
    let ks = [1, 5, 10];
    for seed in 0..100u64 {
        let mut rng = ChaCha20Rng::seed_from_u64(80_000 + seed);
        let zx = batch(&random_matrix(&mut rng, 100, 16, -1.0));
        let zy = batch(&random_matrix(&mut rng, 100, 16, -1.0));
        let (fwd, _) = evaluate_retrieval(&zx, &zy, &ks).unwrap();

        // full-sort oracle over the same score matrix: ties resolved
        // pessimistically (competitors sort before the true match)
        let scores = cosine_similarity_matrix(&zx, &zy).unwrap().scores;
        let n = scores.nrows();
        let mut ranks = Vec::with_capacity(n);
        for i in 0..n {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                scores[[i, b]]
                    .partial_cmp(&scores[[i, a]])
                    .unwrap()
                    .then((b == i).cmp(&(a == i)))
            });
            ranks.push(order.iter().position(|&j| j == i).unwrap() + 1);
        }
        assert_eq!(fwd.ranks, ranks, "ranks diverged from sort oracle (seed {seed})");
        for &k in &ks {
            let frac = ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
            assert_eq!(fwd.r_at[&k], frac, "R@{k} diverged (seed {seed})");
        }
        let mut sorted = ranks.clone();
        sorted.sort_unstable();
        assert_eq!(fwd.mdr, sorted[(n - 1) / 2] as f64, "MdR diverged (seed {seed})");
        let mnr = ranks.iter().sum::<usize>() as f64 / n as f64;
        assert!((fwd.mnr - mnr).abs() < 1e-12, "MnR diverged (seed {seed})");
    }

    // worked 3x3 example: unit circle angles chosen so the cosine score
    // matrix yields ranks (1, 1, 3)
    let angle = |deg: f64| {
        let r = deg.to_radians();
        vec![r.cos(), r.sin()]
    };
    let zx = EmbeddingBatch::from_rows(&[angle(0.0), angle(40.0), angle(90.0)]).unwrap();
    let zy = EmbeddingBatch::from_rows(&[angle(0.0), angle(40.0), angle(270.0)]).unwrap();
    let (fwd, _) = evaluate_retrieval(&zx, &zy, &[1]).unwrap();
    assert_eq!(fwd.ranks, vec![1, 1, 3]);
    assert!((fwd.r_at[&1] - 2.0 / 3.0).abs() < 1e-15);
    assert!((fwd.mnr - 5.0 / 3.0).abs() < 1e-15);
    assert_eq!(fwd.mdr, 1.0);

    verdict(
        6,
        "retrieval metric correctness",
        true,
        "100 random 100x100 matrices + worked 3x3 example match the sort oracle",
    );
}

// ---------------------------------------------------------------------------
// criteria 7 & 8: desk-scale benchmark, shared between the two tests

struct BenchRun {
    r1_fwd: f64,
    pos_mean: f64,
    neg_mean: f64,
}

struct Bench {
    crossclr: Vec<BenchRun>,
    ntxent: Vec<BenchRun>,
    /// (loss name, run) for the single-seed baselines.
    others: Vec<(&'static str, BenchRun)>,
    elapsed: Duration,
}

static BENCH: OnceLock<Bench> = OnceLock::new();

fn bench_run(kind: LossKind, seed: u64) -> BenchRun {
    let mut ds = generate_synthetic(2560, 32, 64, 48, 0.3, 0.4, 777).unwrap();
    ds.splits = SplitRanges::consecutive(2560, 2048, 512).unwrap();
    // batch-level connectivity can sum to a negative total on this data,
    // which sum-to-one weight normalization rejects; the batch-mode entry
    // uses unnormalized weights (queue-mode connectivity is stable enough
    // for the defaults)
    let loss = if kind == LossKind::CrossclrBatch {
        LossConfig {
            kappa: 0.05,
            weight_norm: WeightNorm::None,
            ..LossConfig::default()
        }
    } else {
        LossConfig::default()
    };
    let config = TrainConfig {
        loss_kind: kind,
        seed,
        loss,
        ..TrainConfig::default()
    };
    let (state, _) = fit(config, &ds).unwrap();
    let (vx, vy) = ds.split(Split::Val).unwrap();
    let zx = state.enc_x.forward(&vx).unwrap();
    let zy = state.enc_y.forward(&vy).unwrap();
    let (fwd, _) = evaluate_retrieval(&zx, &zy, &[1, 5, 10]).unwrap();
    let hist = similarity_histograms(&zx, &zy, 40).unwrap();
    BenchRun {
        r1_fwd: fwd.r_at[&1],
        pos_mean: hist.positive_mean,
        neg_mean: hist.negative_mean,
    }
}

fn bench() -> &'static Bench {
    BENCH.get_or_init(|| {
        let start = Instant::now();
        let jobs: Vec<(&'static str, LossKind, u64)> = (0..5)
            .map(|s| ("crossclr", LossKind::Crossclr, 100 + s))
            .chain((0..5).map(|s| ("ntxent", LossKind::Ntxent, 100 + s)))
            .chain([
                ("crossclr_batch", LossKind::CrossclrBatch, 100),
                ("clip_symmetric", LossKind::ClipSymmetric, 100),
                ("max_margin", LossKind::MaxMargin, 100),
            ])
            .collect();
        let runs: Vec<(&'static str, BenchRun)> = std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .iter()
                .map(|&(name, kind, seed)| scope.spawn(move || (name, bench_run(kind, seed))))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        let mut bench = Bench {
            crossclr: Vec::new(),
            ntxent: Vec::new(),
            others: Vec::new(),
            elapsed: Duration::ZERO,
        };
        for (name, run) in runs {
            match name {
                "crossclr" => bench.crossclr.push(run),
                "ntxent" => bench.ntxent.push(run),
                _ => bench.others.push((name, run)),
            }
        }
        bench.elapsed = start.elapsed();
        bench
    })
}

#[test]
fn criterion_07_benchmark_retrieval() {
    let b = bench();
    let floor = 20.0 / 512.0;
    let mut min_r1 = f64::INFINITY;
    let mut all_above = true;
    let mut summary = String::new();
    let mean = |runs: &[BenchRun]| runs.iter().map(|r| r.r1_fwd).sum::<f64>() / runs.len() as f64;
    for (name, r1) in b
        .crossclr
        .iter()
        .map(|r| ("crossclr", r.r1_fwd))
        .chain(b.ntxent.iter().map(|r| ("ntxent", r.r1_fwd)))
        .chain(b.others.iter().map(|(n, r)| (*n, r.r1_fwd)))
    {
        min_r1 = min_r1.min(r1);
        if r1 < floor {
            all_above = false;
            summary.push_str(&format!("{name} below floor at {r1:.4}; "));
        }
    }
    let cc = mean(&b.crossclr);
    let nt = mean(&b.ntxent);
    let directional = cc >= nt - 0.01;
    let in_time = b.elapsed < Duration::from_secs(600);
    verdict(
        7,
        "benchmark retrieval",
        all_above && directional && in_time,
        &format!(
            "{summary}min R@1 {min_r1:.3} (floor {floor:.3}); crossclr mean {cc:.3} vs ntxent {nt:.3}; {:.0?}",
            b.elapsed
        ),
    );
}

#[test]
fn criterion_08_similarity_shift() {
    let b = bench();
    let separated = b.crossclr.iter().all(|r| r.pos_mean > r.neg_mean);
    let mean_neg = |runs: &[BenchRun]| runs.iter().map(|r| r.neg_mean).sum::<f64>() / runs.len() as f64;
    let cc = mean_neg(&b.crossclr);
    let nt = mean_neg(&b.ntxent);
    verdict(
        8,
        "similarity distribution shift",
        separated && cc > nt,
        &format!("pos > neg on all crossclr seeds; mean negative sim {cc:.4} vs ntxent {nt:.4}"),
    );
}

// ---------------------------------------------------------------------------
// criterion 9: ablation grid

#[test]
fn criterion_09_ablation_grid() {
    let mut ds = generate_synthetic(2560, 32, 64, 48, 0.3, 0.4, 777).unwrap();
    ds.splits = SplitRanges::consecutive(2560, 2048, 512).unwrap();

    let cell_mean = |pw: bool, im: bool, np: bool| -> f64 {
        let mut sum = 0.0;
        for seed in 0..5u64 {
            let config = TrainConfig {
                epochs: 12,
                loss_kind: LossKind::CrossclrBatch,
                seed: 300 + seed,
                // batch-level connectivity can sum to a negative total on
                // this data, which sum-to-one normalization rejects; the
                // weighting cells use unnormalized weights instead
                loss: LossConfig {
                    kappa: 0.05,
                    weight_norm: WeightNorm::None,
                    weighting_enabled: pw,
                    intra_enabled: im,
                    pruning_enabled: np,
                    ..LossConfig::default()
                },
                ..TrainConfig::default()
            };
            let (state, _) = fit(config, &ds).unwrap();
            let (vx, vy) = ds.split(Split::Val).unwrap();
            let zx = state.enc_x.forward(&vx).unwrap();
            let zy = state.enc_y.forward(&vy).unwrap();
            let (fwd, _) = evaluate_retrieval(&zx, &zy, &[1]).unwrap();
            sum += fwd.r_at[&1];
        }
        sum / 5.0
    };

    let mut grid = Vec::new();
    for cell in 0..8u32 {
        let pw = cell & 1 != 0;
        let im = cell & 2 != 0;
        let np = cell & 4 != 0;
        grid.push(((pw, im, np), cell_mean(pw, im, np)));
    }
    let all_on = grid.iter().find(|(f, _)| *f == (true, true, true)).unwrap().1;
    let all_off = grid.iter().find(|(f, _)| *f == (false, false, false)).unwrap().1;
    verdict(
        9,
        "ablation grid",
        all_on >= all_off - 0.01,
        &format!("8/8 cells completed; all-on mean R@1 {all_on:.3} vs all-off {all_off:.3}"),
    );
}

// ---------------------------------------------------------------------------
// criterion 10: bit-identical reports on rerun

#[test]
fn criterion_10_report_determinism() {
    let bin = env!("CARGO_BIN_EXE_crossclr");
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        serde_json::json!({
            "seed": 3,
            "data": {
                "n_pairs": 96, "n_clusters": 4, "d_x": 12, "d_y": 10,
                "noise_sigma": 0.2, "overlap": 0.3, "train": 64, "val": 32
            },
            "train": {
                "epochs": 2, "batch_size": 16, "queue_capacity": 64, "embed_dim": 16,
                "loss": {"kappa": 0.05}
            },
            "gradcheck_configs": 10,
            "cell_seeds": 2,
            "compare_losses": ["crossclr_batch", "ntxent"]
        })
        .to_string(),
    )
    .unwrap();

    let mut mismatches = Vec::new();
    for command in ["gen", "gradcheck", "train", "compare"] {
        let out_dir = tmp.path().join(command);
        let mut reports = Vec::new();
        for run in 0..2 {
            let status = Command::new(bin)
                .arg(command)
                .arg("--config")
                .arg(&cfg_path)
                .arg("--out")
                .arg(&out_dir)
                .output()
                .unwrap();
            assert!(
                status.status.success(),
                "{command} run {run} failed: {}",
                String::from_utf8_lossy(&status.stderr)
            );
            // the two runs land in differently-timestamped files; the content
            // must be byte-identical
            std::thread::sleep(Duration::from_millis(5));
        }
        let mut files: Vec<_> = std::fs::read_dir(&out_dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| {
                p.file_name()
                    .unwrap()
                    .to_str()
                    .unwrap()
                    .starts_with(&format!("{command}."))
            })
            .collect();
        files.sort();
        assert_eq!(files.len(), 2, "{command}: expected two report files");
        for f in &files {
            reports.push(std::fs::read(f).unwrap());
        }
        if reports[0] != reports[1] {
            mismatches.push(command);
        }
    }
    verdict(
        10,
        "report determinism",
        mismatches.is_empty(),
        &format!(
            "gen/gradcheck/train/compare reruns byte-identical{}",
            if mismatches.is_empty() {
                String::new()
            } else {
                format!("; mismatched: {mismatches:?}")
            }
        ),
    );
}
