//! Command-line experiment runner: dataset generation, training, evaluation,
//! gradient checking, loss comparison, ablations and hyperparameter sweeps.
//! Every run writes a JSON report echoing its fully resolved config; report
//! content is a pure function of config and seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_dataset, save_dataset, PairedEmbeddingDataset, Split, SplitRanges};
use crate::error::{Error, Result};
use crate::eval::{evaluate_retrieval, similarity_histograms};
use crate::losses::gradcheck_battery;
use crate::trainer::{fit, load_checkpoint, save_checkpoint, LossKind, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_PATH: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

#[derive(Parser, Debug)]
#[command(name = "crossclr", about = "Cross-modal contrastive learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base rng seed (required here or in the config file).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for reports and artifacts.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset manifest (or directory); generated from config when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Loss kind: crossclr | crossclr_batch | crossclr_multipos | ntxent |
    /// clip_symmetric | max_margin.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Queue capacity.
    #[arg(long)]
    pub queue: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Batch size.
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic paired dataset and write it as XEMB + manifest.
    Gen(CommonArgs),
    /// Train a model; writes a checkpoint and a per-epoch log.
    Train(CommonArgs),
    /// Evaluate a checkpoint: retrieval report + similarity histograms.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Finite-difference gradient verification across seeded configs.
    Gradcheck(CommonArgs),
    /// Train every loss kind over several seeds and tabulate retrieval.
    Compare(CommonArgs),
    /// 2^3 grid over proximity weighting, intra-modality alignment and
    /// negative pruning.
    Ablate(CommonArgs),
    /// Metric-vs-gamma and metric-vs-kappa curves.
    Sweep(CommonArgs),
}

/// Synthetic data parameters (ignored when --data points at a manifest).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataParams {
    pub n_pairs: usize,
    pub n_clusters: usize,
    pub d_x: usize,
    pub d_y: usize,
    pub noise_sigma: f64,
    pub overlap: f64,
    /// Rows in the train split; the next `val` rows form the val split.
    pub train: usize,
    pub val: usize,
}

impl Default for DataParams {
    fn default() -> Self {
        Self {
            n_pairs: 2560,
            n_clusters: 32,
            d_x: 64,
            d_y: 48,
            noise_sigma: 0.3,
            overlap: 0.4,
            train: 2048,
            val: 512,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub data: DataParams,
    pub train: TrainConfig,
    /// Seeds per cell in compare/ablate.
    pub cell_seeds: usize,
    /// Gradcheck: number of randomized configurations and error bound.
    pub gradcheck_configs: usize,
    pub gradcheck_tolerance: f64,
    /// Histogram bins for eval.
    pub bins: usize,
    /// Loss kinds for compare.
    pub compare_losses: Vec<String>,
    pub sweep_gammas: Vec<f64>,
    pub sweep_kappas: Vec<f64>,
}

fn default_config() -> ExperimentConfig {
    ExperimentConfig {
        seed: None,
        out: None,
        data: DataParams::default(),
        train: TrainConfig::default(),
        cell_seeds: 5,
        gradcheck_configs: 100,
        gradcheck_tolerance: 1e-4,
        bins: 40,
        compare_losses: vec![
            "crossclr".into(),
            "ntxent".into(),
            "clip_symmetric".into(),
            "max_margin".into(),
        ],
        sweep_gammas: (1..=10).map(|i| i as f64 / 10.0).collect(),
        sweep_kappas: vec![0.1, 0.01, 0.009, 0.007, 0.005, 0.003, 0.001],
    }
}

fn parse_loss_kind(name: &str) -> Result<LossKind> {
    match name {
        "crossclr" => Ok(LossKind::Crossclr),
        "crossclr_batch" => Ok(LossKind::CrossclrBatch),
        "crossclr_multipos" => Ok(LossKind::CrossclrMultipos),
        "ntxent" => Ok(LossKind::Ntxent),
        "clip_symmetric" => Ok(LossKind::ClipSymmetric),
        "max_margin" => Ok(LossKind::MaxMargin),
        other => Err(Error::ConfigParse(format!("unknown loss kind '{other}'"))),
    }
}

fn loss_kind_name(kind: LossKind) -> &'static str {
    match kind {
        LossKind::Crossclr => "crossclr",
        LossKind::CrossclrBatch => "crossclr_batch",
        LossKind::CrossclrMultipos => "crossclr_multipos",
        LossKind::Ntxent => "ntxent",
        LossKind::ClipSymmetric => "clip_symmetric",
        LossKind::MaxMargin => "max_margin",
    }
}

/// Config file plus flag overrides, with the seed made mandatory.
pub fn resolve_config(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::PathError(format!("{}: {e}", path.display())))?;
            let mut file_cfg: ExperimentConfig = serde_json::from_str(&text)
                .map_err(|e| Error::ConfigParse(format!("{}: {e}", path.display())))?;
            // fill defaults the file left out but Default::default() zeroes
            let defaults = default_config();
            if file_cfg.cell_seeds == 0 {
                file_cfg.cell_seeds = defaults.cell_seeds;
            }
            if file_cfg.gradcheck_configs == 0 {
                file_cfg.gradcheck_configs = defaults.gradcheck_configs;
            }
            if file_cfg.gradcheck_tolerance == 0.0 {
                file_cfg.gradcheck_tolerance = defaults.gradcheck_tolerance;
            }
            if file_cfg.bins == 0 {
                file_cfg.bins = defaults.bins;
            }
            if file_cfg.compare_losses.is_empty() {
                file_cfg.compare_losses = defaults.compare_losses;
            }
            if file_cfg.sweep_gammas.is_empty() {
                file_cfg.sweep_gammas = defaults.sweep_gammas;
            }
            if file_cfg.sweep_kappas.is_empty() {
                file_cfg.sweep_kappas = defaults.sweep_kappas;
            }
            file_cfg
        }
        None => default_config(),
    };

    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if let Some(loss) = &common.loss {
        cfg.train.loss_kind = parse_loss_kind(loss)?;
    }
    if let Some(v) = common.gamma {
        cfg.train.loss.gamma = v;
    }
    if let Some(v) = common.kappa {
        cfg.train.loss.kappa = v;
    }
    if let Some(v) = common.lambda {
        cfg.train.loss.lambda_intra = v;
    }
    if let Some(v) = common.tau {
        cfg.train.loss.tau = v;
    }
    if let Some(v) = common.queue {
        cfg.train.queue_capacity = v;
    }
    if let Some(v) = common.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = common.batch {
        cfg.train.batch_size = v;
    }
    if cfg.seed.is_none() {
        return Err(Error::ConfigParse(
            "a seed is required (--seed or \"seed\" in the config file)".into(),
        ));
    }
    cfg.train.seed = cfg.seed.unwrap();
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir)
        .map_err(|e| Error::PathError(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

/// Writes `{command}.{timestamp}.json` and points `latest.json` at it.
/// Report content contains no timestamps, so identical configs produce
/// bit-identical report bytes.
fn write_report(dir: &Path, command: &str, report: &serde_json::Value) -> Result<PathBuf> {
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default();
    let name = format!("{command}.{}.{:09}.json", now.as_secs(), now.subsec_nanos());
    let path = dir.join(&name);
    fs::write(&path, serde_json::to_string_pretty(report)?)?;

    let latest_path = dir.join("latest.json");
    let mut latest: BTreeMap<String, String> = match fs::read_to_string(&latest_path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
        Err(_) => BTreeMap::new(),
    };
    latest.insert(command.to_string(), name);
    fs::write(&latest_path, serde_json::to_string_pretty(&latest)?)?;
    Ok(path)
}

fn obtain_dataset(cfg: &ExperimentConfig, data: &Option<PathBuf>) -> Result<PairedEmbeddingDataset> {
    match data {
        Some(path) => {
            if !path.exists() {
                return Err(Error::PathError(format!(
                    "dataset path {} does not exist",
                    path.display()
                )));
            }
            load_dataset(path)
        }
        None => {
            let d = &cfg.data;
            let mut ds = generate_synthetic(
                d.n_pairs,
                d.n_clusters,
                d.d_x,
                d.d_y,
                d.noise_sigma,
                d.overlap,
                cfg.seed.unwrap(),
            )?;
            ds.splits = SplitRanges::consecutive(d.n_pairs, d.train, d.val)?;
            Ok(ds)
        }
    }
}

fn echo(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

#[derive(Debug, Clone, Serialize)]
struct CellMetrics {
    r1_fwd: f64,
    r1_bwd: f64,
    r5_fwd: f64,
    r5_bwd: f64,
    r10_fwd: f64,
    r10_bwd: f64,
}

fn train_cell(
    cfg: &ExperimentConfig,
    ds: &PairedEmbeddingDataset,
    train: TrainConfig,
) -> Result<CellMetrics> {
    let (state, _) = fit(train, ds)?;
    let (vx, vy) = ds.split(Split::Val)?;
    let zx = state.enc_x.forward(&vx)?;
    let zy = state.enc_y.forward(&vy)?;
    let n = zx.n();
    let ks: Vec<usize> = [1, 5, 10].into_iter().filter(|&k| k <= n).collect();
    let (fwd, bwd) = evaluate_retrieval(&zx, &zy, &ks)?;
    let _ = cfg;
    let get = |m: &BTreeMap<usize, f64>, k: usize| m.get(&k).copied().unwrap_or(f64::NAN);
    Ok(CellMetrics {
        r1_fwd: get(&fwd.r_at, 1),
        r1_bwd: get(&bwd.r_at, 1),
        r5_fwd: get(&fwd.r_at, 5),
        r5_bwd: get(&bwd.r_at, 5),
        r10_fwd: get(&fwd.r_at, 10),
        r10_bwd: get(&bwd.r_at, 10),
    })
}

fn mean_std(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Table-style "19.5±0.49" formatting of a recall fraction.
fn pct(mean: f64, std: f64) -> String {
    format!("{:.1}±{:.2}", mean * 100.0, std * 100.0)
}

fn cmd_gen(common: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(common)?;
    let dir = out_dir(&cfg)?;
    let ds = obtain_dataset(&cfg, &None)?;
    let manifest = save_dataset(&ds, &dir.join("dataset"))?;
    let report = serde_json::json!({
        "config": echo(&cfg)?,
        "n_pairs": ds.n(),
        "d_x": ds.x.ncols(),
        "d_y": ds.y.ncols(),
        "manifest": "dataset/manifest.json",
    });
    let path = write_report(&dir, "gen", &report)?;
    println!("wrote {} and {}", manifest.display(), path.display());
    Ok(())
}

fn cmd_train(common: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(common)?;
    let dir = out_dir(&cfg)?;
    let ds = obtain_dataset(&cfg, &common.data)?;
    let (state, logs) = fit(cfg.train.clone(), &ds)?;
    let ckpt = dir.join("checkpoint.xckp");
    save_checkpoint(&state, &ckpt)?;
    let report = serde_json::json!({
        "config": echo(&cfg)?,
        "loss_kind": loss_kind_name(cfg.train.loss_kind),
        "epochs": logs,
        "checkpoint": "checkpoint.xckp",
    });
    let path = write_report(&dir, "train", &report)?;
    println!("wrote {} and {}", ckpt.display(), path.display());
    Ok(())
}

fn cmd_eval(common: &CommonArgs, checkpoint: &Path) -> Result<()> {
    let cfg = resolve_config(common)?;
    let dir = out_dir(&cfg)?;
    if !checkpoint.exists() {
        return Err(Error::PathError(format!(
            "checkpoint {} does not exist",
            checkpoint.display()
        )));
    }
    let state = load_checkpoint(checkpoint)?;
    let ds = obtain_dataset(&cfg, &common.data)?;
    let (vx, vy) = if ds.split_len(Split::Val) > 0 {
        ds.split(Split::Val)?
    } else {
        ds.split(Split::Train)?
    };
    let zx = state.enc_x.forward(&vx)?;
    let zy = state.enc_y.forward(&vy)?;
    let n = zx.n();
    let ks: Vec<usize> = [1, 5, 10].into_iter().filter(|&k| k <= n).collect();
    let (fwd, bwd) = evaluate_retrieval(&zx, &zy, &ks)?;
    let hist = similarity_histograms(&zx, &zy, cfg.bins)?;
    let report = serde_json::json!({
        "config": echo(&cfg)?,
        "retrieval": { "a_to_b": fwd, "b_to_a": bwd },
        "histogram": hist,
    });
    let path = write_report(&dir, "eval", &report)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_gradcheck(common: &CommonArgs) -> Result<i32> {
    let cfg = resolve_config(common)?;
    let dir = out_dir(&cfg)?;
    let base_seed = cfg.seed.unwrap();
    // the battery covers every loss kind and flag combination per seed; vary
    // the seed to cover many random configurations
    let n_batches = cfg.gradcheck_configs.div_ceil(10).max(1);
    let mut rows = Vec::new();
    let mut max_err = 0.0f64;
    for b in 0..n_batches {
        for case in gradcheck_battery(base_seed + b as u64)? {
            max_err = max_err.max(case.report.max_rel_err);
            rows.push(serde_json::json!({
                "name": case.name,
                "seed": base_seed + b as u64,
                "max_rel_err": case.report.max_rel_err,
                "checked": case.report.checked,
                "skipped": case.report.skipped,
            }));
        }
    }
    let pass = max_err < cfg.gradcheck_tolerance;
    let report = serde_json::json!({
        "config": echo(&cfg)?,
        "cases": rows,
        "max_rel_err": max_err,
        "tolerance": cfg.gradcheck_tolerance,
        "pass": pass,
    });
    let path = write_report(&dir, "gradcheck", &report)?;
    println!(
        "max relative error {max_err:.3e} (tolerance {:.1e}); wrote {}",
        cfg.gradcheck_tolerance,
        path.display()
    );
    Ok(if pass { EXIT_OK } else { EXIT_GRADCHECK })
}

fn cmd_compare(common: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(common)?;
    let dir = out_dir(&cfg)?;
    let ds = obtain_dataset(&cfg, &common.data)?;
    let base_seed = cfg.seed.unwrap();

    let mut rows = Vec::new();
    let mut text = String::from(
        "loss                 R@1 a>b     R@1 b>a     R@5 a>b     R@5 b>a     R@10 a>b    R@10 b>a\n",
    );
    for (li, name) in cfg.compare_losses.iter().enumerate() {
        let kind = parse_loss_kind(name)?;
        let mut cells = Vec::new();
        for s in 0..cfg.cell_seeds {
            // each cell independently seeded
            let mut train = cfg.train.clone();
            train.loss_kind = kind;
            train.seed = base_seed + (li * 1000 + s) as u64;
            cells.push(train_cell(&cfg, &ds, train)?);
        }
        let stat = |f: &dyn Fn(&CellMetrics) -> f64| {
            let vals: Vec<f64> = cells.iter().map(f).collect();
            mean_std(&vals)
        };
        let (m1f, s1f) = stat(&|c| c.r1_fwd);
        let (m1b, s1b) = stat(&|c| c.r1_bwd);
        let (m5f, s5f) = stat(&|c| c.r5_fwd);
        let (m5b, s5b) = stat(&|c| c.r5_bwd);
        let (m10f, s10f) = stat(&|c| c.r10_fwd);
        let (m10b, s10b) = stat(&|c| c.r10_bwd);
        text.push_str(&format!(
            "{:<20} {:<11} {:<11} {:<11} {:<11} {:<11} {:<11}\n",
            name,
            pct(m1f, s1f),
            pct(m1b, s1b),
            pct(m5f, s5f),
            pct(m5b, s5b),
            pct(m10f, s10f),
            pct(m10b, s10b),
        ));
        rows.push(serde_json::json!({
            "loss": name,
            "seeds": cfg.cell_seeds,
            "r1_fwd": { "mean": m1f, "std": s1f, "formatted": pct(m1f, s1f) },
            "r1_bwd": { "mean": m1b, "std": s1b, "formatted": pct(m1b, s1b) },
            "r5_fwd": { "mean": m5f, "std": s5f, "formatted": pct(m5f, s5f) },
            "r5_bwd": { "mean": m5b, "std": s5b, "formatted": pct(m5b, s5b) },
            "r10_fwd": { "mean": m10f, "std": s10f, "formatted": pct(m10f, s10f) },
            "r10_bwd": { "mean": m10b, "std": s10b, "formatted": pct(m10b, s10b) },
        }));
    }
    let report = serde_json::json!({
        "config": echo(&cfg)?,
        "table": rows,
        "table_text": text,
    });
    let path = write_report(&dir, "compare", &report)?;
    print!("{text}");
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_ablate(common: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(common)?;
    let dir = out_dir(&cfg)?;
    let ds = obtain_dataset(&cfg, &common.data)?;
    let base_seed = cfg.seed.unwrap();

    let mut rows = Vec::new();
    let mut text =
        String::from("P_W   I_M   N_P   R@1 a>b     R@1 b>a\n");
    for cell in 0..8u32 {
        let pw = cell & 1 != 0;
        let im = cell & 2 != 0;
        let np = cell & 4 != 0;
        let mut vals_fwd = Vec::new();
        let mut vals_bwd = Vec::new();
        for s in 0..cfg.cell_seeds {
            let mut train = cfg.train.clone();
            train.loss.weighting_enabled = pw;
            train.loss.intra_enabled = im;
            train.loss.pruning_enabled = np;
            train.seed = base_seed + (cell as usize * 1000 + s) as u64;
            let m = train_cell(&cfg, &ds, train)?;
            vals_fwd.push(m.r1_fwd);
            vals_bwd.push(m.r1_bwd);
        }
        let (mf, sf) = mean_std(&vals_fwd);
        let (mb, sb) = mean_std(&vals_bwd);
        text.push_str(&format!(
            "{:<5} {:<5} {:<5} {:<11} {:<11}\n",
            if pw { "on" } else { "off" },
            if im { "on" } else { "off" },
            if np { "on" } else { "off" },
            pct(mf, sf),
            pct(mb, sb),
        ));
        rows.push(serde_json::json!({
            "proximity_weighting": pw,
            "intra_modality": im,
            "negative_pruning": np,
            "r1_fwd": { "mean": mf, "std": sf },
            "r1_bwd": { "mean": mb, "std": sb },
        }));
    }
    let report = serde_json::json!({
        "config": echo(&cfg)?,
        "grid": rows,
        "table_text": text,
    });
    let path = write_report(&dir, "ablate", &report)?;
    print!("{text}");
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_sweep(common: &CommonArgs) -> Result<()> {
    let cfg = resolve_config(common)?;
    let dir = out_dir(&cfg)?;
    let ds = obtain_dataset(&cfg, &common.data)?;
    let base_seed = cfg.seed.unwrap();

    let run = |param: &str, value: f64, cell: usize| -> Result<serde_json::Value> {
        let mut train = cfg.train.clone();
        match param {
            "gamma" => train.loss.gamma = value,
            _ => train.loss.kappa = value,
        }
        train.seed = base_seed + cell as u64 * 1000;
        let m = train_cell(&cfg, &ds, train)?;
        Ok(serde_json::json!({
            param: value,
            "r1_fwd": m.r1_fwd,
            "r1_bwd": m.r1_bwd,
        }))
    };

    let mut gamma_series = Vec::new();
    for (i, &g) in cfg.sweep_gammas.iter().enumerate() {
        gamma_series.push(run("gamma", g, i)?);
    }
    let mut kappa_series = Vec::new();
    for (i, &k) in cfg.sweep_kappas.iter().enumerate() {
        kappa_series.push(run("kappa", k, 100 + i)?);
    }
    let report = serde_json::json!({
        "config": echo(&cfg)?,
        "gamma_series": gamma_series,
        "kappa_series": kappa_series,
    });
    let path = write_report(&dir, "sweep", &report)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::ConfigParse(_) => EXIT_CONFIG,
        Error::PathError(_) => EXIT_PATH,
        _ => EXIT_FAILURE,
    }
}

/// Runs a parsed command, returning the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result: Result<i32> = match &cli.command {
        Command::Gen(c) => cmd_gen(c).map(|_| EXIT_OK),
        Command::Train(c) => cmd_train(c).map(|_| EXIT_OK),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint).map(|_| EXIT_OK),
        Command::Gradcheck(c) => cmd_gradcheck(c),
        Command::Compare(c) => cmd_compare(c).map(|_| EXIT_OK),
        Command::Ablate(c) => cmd_ablate(c).map(|_| EXIT_OK),
        Command::Sweep(c) => cmd_sweep(c).map(|_| EXIT_OK),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}
