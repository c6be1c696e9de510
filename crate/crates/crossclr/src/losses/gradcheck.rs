//! Central-difference verification of analytic gradients, plus a standard
//! battery of loss configurations used by the CLI and the test suite.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::embedding::EmbeddingBatch;
use crate::error::Result;
use crate::influence::{ThresholdMode, WeightNorm};
use crate::queue::MemoryQueue;

use super::{
    clip_symmetric, crossclr_batch, crossclr_multipos, crossclr_queue, max_margin, ntxent,
    IdentityProjector, LossConfig, Reduction,
};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Max coordinates checked per call; larger parameter sets are sampled.
    pub max_coords: usize,
    pub seed: u64,
    /// Relative-error bound for a coordinate to pass.
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 4096,
            seed: 0,
            tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates skipped because forward and backward differences disagree
    /// (the objective has a kink there).
    pub skipped: usize,
    pub max_rel_err: f64,
    /// (matrix index, row, col) of the worst coordinate.
    pub worst_coord: Option<(usize, usize, usize)>,
    pub passed: bool,
}

/// Compares analytic gradients against central differences of `f` at
/// `params`. Relative error is |fd - g| / max(1, |g|); coordinates where the
/// one-sided differences disagree by more than 1% are skipped as kinks.
pub fn finite_diff_check<F>(
    params: &[Array2<f64>],
    grads: &[Array2<f64>],
    mut f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Array2<f64>]) -> Result<f64>,
{
    assert_eq!(params.len(), grads.len());
    let h = cfg.step.clamp(1e-7, 1e-3);

    let mut coords = Vec::new();
    for (m, p) in params.iter().enumerate() {
        for i in 0..p.nrows() {
            for j in 0..p.ncols() {
                coords.push((m, i, j));
            }
        }
    }
    if coords.len() > cfg.max_coords {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        coords.shuffle(&mut rng);
        coords.truncate(cfg.max_coords);
    }

    let base = f(params)?;
    let mut work: Vec<Array2<f64>> = params.to_vec();
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut max_rel_err = 0.0f64;
    let mut worst_coord = None;

    for &(m, i, j) in &coords {
        let orig = work[m][[i, j]];
        work[m][[i, j]] = orig + h;
        let plus = f(&work)?;
        work[m][[i, j]] = orig - h;
        let minus = f(&work)?;
        work[m][[i, j]] = orig;

        let g_fwd = (plus - base) / h;
        let g_bwd = (base - minus) / h;
        let g_central = (plus - minus) / (2.0 * h);
        if (g_fwd - g_bwd).abs() > 1e-2 * g_central.abs().max(1.0) {
            skipped += 1;
            continue;
        }

        let g = grads[m][[i, j]];
        let rel = (g_central - g).abs() / g.abs().max(1.0);
        checked += 1;
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_coord = Some((m, i, j));
        }
    }

    Ok(GradCheckReport {
        checked,
        skipped,
        max_rel_err,
        worst_coord,
        passed: max_rel_err <= cfg.tolerance && checked > 0,
    })
}

#[derive(Debug, Clone)]
pub struct BatteryCase {
    pub name: String,
    pub report: GradCheckReport,
}

fn batch(rng: &mut ChaCha20Rng, n: usize, d: usize, lo: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.gen_range(lo..1.0))
}

/// Input batch with a tight 3-row cluster and n - 3 spread-out rows: the
/// cluster ends up influential under every threshold mode used below while
/// the rest stays, so pruning is active but never empties the negative sets.
fn clustered_inputs(rng: &mut ChaCha20Rng, n: usize, d: usize) -> Array2<f64> {
    let mut data = Array2::zeros((n, d));
    for i in 0..3 {
        for j in 0..d {
            data[[i, j]] = 1.0 / (d as f64).sqrt() + rng.gen_range(-0.01..0.01);
        }
    }
    for i in 3..n {
        for j in 0..d {
            data[[i, j]] = 0.2 + if j == i % d { 1.0 } else { 0.0 };
        }
    }
    data
}

/// Runs the finite-difference check over a fixed set of loss configurations.
pub fn gradcheck_battery(seed: u64) -> Result<Vec<BatteryCase>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = 8;
    let d = 6;
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    let mut cases = Vec::new();

    // entries bounded away from zero keep connectivity strictly positive, so
    // the max-relative mask and sum-normalized weights are locally smooth
    let in_x = clustered_inputs(&mut rng, n, d + 2);
    let in_y = clustered_inputs(&mut rng, n, d + 2);
    let zx0 = batch(&mut rng, n, d, -1.0);
    let zy0 = batch(&mut rng, n, d, -1.0);

    let run_batch = |name: &str, loss_cfg: LossConfig, cases: &mut Vec<BatteryCase>| -> Result<()> {
        let ex = EmbeddingBatch::new(zx0.clone())?;
        let ey = EmbeddingBatch::new(zy0.clone())?;
        let ix = EmbeddingBatch::new(in_x.clone())?;
        let iy = EmbeddingBatch::new(in_y.clone())?;
        let out = crossclr_batch(&ex, &ey, &ix, &iy, &loss_cfg)?;
        let report = finite_diff_check(
            &[zx0.clone(), zy0.clone()],
            &[out.grad_zx, out.grad_zy],
            |p| {
                let ex = EmbeddingBatch::new(p[0].clone())?;
                let ey = EmbeddingBatch::new(p[1].clone())?;
                Ok(crossclr_batch(&ex, &ey, &ix, &iy, &loss_cfg)?.value)
            },
            &cfg,
        )?;
        cases.push(BatteryCase {
            name: name.to_string(),
            report,
        });
        Ok(())
    };

    run_batch("crossclr_default", LossConfig::default(), &mut cases)?;
    // moderate unnormalized weights: the raw sum-to-one weights at kappa
    // 0.0035 make the expectation-reduced value so large that central
    // differences lose too much precision to be meaningful
    run_batch(
        "crossclr_expectation",
        LossConfig {
            reduction: Reduction::Expectation,
            kappa: 0.5,
            weight_norm: WeightNorm::None,
            ..LossConfig::default()
        },
        &mut cases,
    )?;
    run_batch(
        "crossclr_absolute_unnormalized",
        LossConfig {
            threshold_mode: ThresholdMode::Absolute,
            weight_norm: WeightNorm::None,
            kappa: 0.5,
            gamma: 0.6,
            ..LossConfig::default()
        },
        &mut cases,
    )?;
    run_batch(
        "crossclr_no_intra",
        LossConfig {
            intra_enabled: false,
            ..LossConfig::default()
        },
        &mut cases,
    )?;
    run_batch(
        "crossclr_unpruned_unweighted",
        LossConfig {
            pruning_enabled: false,
            weighting_enabled: false,
            ..LossConfig::default()
        },
        &mut cases,
    )?;

    // queue mode: only the projected batch carries gradients
    {
        let loss_cfg = LossConfig {
            pruning_enabled: false,
            weighting_enabled: false,
            ..LossConfig::default()
        };
        let old_x = EmbeddingBatch::new(batch(&mut rng, n, d + 2, 0.1))?;
        let old_y = EmbeddingBatch::new(batch(&mut rng, n, d + 2, 0.1))?;
        let ix = EmbeddingBatch::new(in_x.clone())?;
        let iy = EmbeddingBatch::new(in_y.clone())?;
        let mut queue = MemoryQueue::new(4 * n, d + 2, d + 2);
        queue.enqueue(&old_x, &old_y)?;
        queue.enqueue(&ix, &iy)?;
        let enc = IdentityProjector;
        let zx0q = batch(&mut rng, n, d + 2, -1.0);
        let zy0q = batch(&mut rng, n, d + 2, -1.0);
        let ex = EmbeddingBatch::new(zx0q.clone())?;
        let ey = EmbeddingBatch::new(zy0q.clone())?;
        let out = crossclr_queue(&ex, &ey, &ix, &iy, &queue, &enc, &enc, &loss_cfg)?;
        let report = finite_diff_check(
            &[zx0q.clone(), zy0q.clone()],
            &[out.grad_zx, out.grad_zy],
            |p| {
                let ex = EmbeddingBatch::new(p[0].clone())?;
                let ey = EmbeddingBatch::new(p[1].clone())?;
                Ok(crossclr_queue(&ex, &ey, &ix, &iy, &queue, &enc, &enc, &loss_cfg)?.value)
            },
            &cfg,
        )?;
        cases.push(BatteryCase {
            name: "crossclr_queue".to_string(),
            report,
        });
    }

    // multiple positives
    {
        let loss_cfg = LossConfig {
            beta: 0.15,
            top_k: 2,
            ..LossConfig::default()
        };
        let ix = EmbeddingBatch::new(in_x.clone())?;
        let iy = EmbeddingBatch::new(in_y.clone())?;
        let ex = EmbeddingBatch::new(zx0.clone())?;
        let ey = EmbeddingBatch::new(zy0.clone())?;
        let out = crossclr_multipos(&ex, &ey, &ix, &iy, &loss_cfg)?;
        let report = finite_diff_check(
            &[zx0.clone(), zy0.clone()],
            &[out.grad_zx, out.grad_zy],
            |p| {
                let ex = EmbeddingBatch::new(p[0].clone())?;
                let ey = EmbeddingBatch::new(p[1].clone())?;
                Ok(crossclr_multipos(&ex, &ey, &ix, &iy, &loss_cfg)?.value)
            },
            &cfg,
        )?;
        cases.push(BatteryCase {
            name: "crossclr_multipos".to_string(),
            report,
        });
    }

    let simple = |name: &str,
                  f: &dyn Fn(&EmbeddingBatch, &EmbeddingBatch) -> Result<super::LossOutput>,
                  cases: &mut Vec<BatteryCase>|
     -> Result<()> {
        let ex = EmbeddingBatch::new(zx0.clone())?;
        let ey = EmbeddingBatch::new(zy0.clone())?;
        let out = f(&ex, &ey)?;
        let report = finite_diff_check(
            &[zx0.clone(), zy0.clone()],
            &[out.grad_zx, out.grad_zy],
            |p| {
                let ex = EmbeddingBatch::new(p[0].clone())?;
                let ey = EmbeddingBatch::new(p[1].clone())?;
                Ok(f(&ex, &ey)?.value)
            },
            &cfg,
        )?;
        cases.push(BatteryCase {
            name: name.to_string(),
            report,
        });
        Ok(())
    };

    simple("ntxent", &|a, b| ntxent(a, b, 0.3), &mut cases)?;
    simple("clip_symmetric", &|a, b| clip_symmetric(a, b, 0.3), &mut cases)?;
    simple("max_margin", &|a, b| max_margin(a, b, 0.2), &mut cases)?;

    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn quadratic_passes() {
        // f(x) = sum(x^2), grad = 2x
        let x = array![[0.3, -1.2], [2.0, 0.5]];
        let g = x.mapv(|v| 2.0 * v);
        let report = finite_diff_check(
            &[x],
            &[g],
            |p| Ok(p[0].iter().map(|v| v * v).sum()),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.checked, 4);
        assert_eq!(report.skipped, 0);
    }

    #[test]
    fn wrong_gradient_fails() {
        let x = array![[0.3, -1.2]];
        let g = x.mapv(|v| 3.0 * v);
        let report = finite_diff_check(
            &[x],
            &[g],
            |p| Ok(p[0].iter().map(|v| v * v).sum()),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_err > 1e-2);
    }

    #[test]
    fn kink_is_skipped() {
        // |x| at 0 has disagreeing one-sided slopes
        let x = array![[0.0, 0.5]];
        let g = array![[0.0, 1.0]];
        let report = finite_diff_check(
            &[x],
            &[g],
            |p| Ok(p[0].iter().map(|v| v.abs()).sum()),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 1);
        assert!(report.passed);
    }

    #[test]
    fn coordinate_sampling_caps_work() {
        let x = Array2::from_shape_fn((10, 10), |(i, j)| (i as f64 + 1.0) * 0.1 + j as f64 * 0.01);
        let g = x.mapv(|v| 2.0 * v);
        let cfg = GradCheckConfig {
            max_coords: 17,
            ..GradCheckConfig::default()
        };
        let report = finite_diff_check(&[x], &[g], |p| Ok(p[0].iter().map(|v| v * v).sum()), &cfg)
            .unwrap();
        assert_eq!(report.checked + report.skipped, 17);
    }

    #[test]
    fn battery_all_pass() {
        for case in gradcheck_battery(7).unwrap() {
            assert!(
                case.report.passed,
                "{} failed: max rel err {} at {:?}",
                case.name, case.report.max_rel_err, case.report.worst_coord
            );
        }
    }
}
