//! Toy-scale joint-embedding training: two projection encoders, a paired
//! memory queue, warmup plus reduce-on-plateau scheduling, and per-step
//! updates driven by the loss kernels' exact gradients.

mod encoder;
mod optim;
mod state;

pub use encoder::{flatten_grads, EncoderParams, Layer};
pub use optim::{Optimizer, OptimizerKind};
pub use state::{load_checkpoint, save_checkpoint};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::{PairedEmbeddingDataset, Split};
use crate::embedding::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::eval::evaluate_retrieval;
use crate::losses::{
    clip_symmetric, crossclr_batch, crossclr_multipos, crossclr_queue, max_margin, ntxent,
    LossConfig, LossOutput,
};
use crate::queue::MemoryQueue;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Crossclr,
    CrossclrBatch,
    CrossclrMultipos,
    Ntxent,
    ClipSymmetric,
    MaxMargin,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub plateau_patience: usize,
    pub plateau_cooldown: usize,
    pub lr_decay_factor: f64,
    pub optimizer: OptimizerKind,
    /// Momentum for sgd_momentum, beta1 for adam.
    pub momentum: f64,
    pub seed: u64,
    pub loss_kind: LossKind,
    pub loss: LossConfig,
    pub queue_capacity: usize,
    pub embed_dim: usize,
    /// Adds a gelu hidden layer of this width when set.
    pub hidden_dim: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 40,
            lr: 7e-4,
            warmup_epochs: 4,
            plateau_patience: 6,
            plateau_cooldown: 4,
            lr_decay_factor: 0.1,
            optimizer: OptimizerKind::Adam,
            momentum: 0.56,
            seed: 0,
            loss_kind: LossKind::Crossclr,
            loss: LossConfig::default(),
            queue_capacity: 1024,
            embed_dim: 64,
            hidden_dim: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::ConfigParse(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.lr < 0.0 || self.lr_decay_factor <= 0.0 || self.lr_decay_factor > 1.0 {
            return Err(Error::ConfigParse(
                "lr must be >= 0 and lr_decay_factor in (0, 1]".into(),
            ));
        }
        if self.embed_dim < 2 {
            return Err(Error::ConfigParse(format!(
                "embed_dim must be >= 2, got {}",
                self.embed_dim
            )));
        }
        if self.queue_capacity < self.batch_size {
            return Err(Error::ConfigParse(format!(
                "queue_capacity {} below batch_size {}",
                self.queue_capacity, self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub enc_x: EncoderParams,
    pub enc_y: EncoderParams,
    pub opt_x: Optimizer,
    pub opt_y: Optimizer,
    pub queue: MemoryQueue,
    pub epoch: usize,
    pub step: u64,
    /// Base lr after plateau decays; warmup scales it per epoch.
    pub lr: f64,
    pub best_val: f64,
    pub epochs_since_best: usize,
    pub cooldown_remaining: usize,
    pub rng: ChaCha20Rng,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValMetrics {
    pub r1_sum: f64,
    pub r_at_fwd: std::collections::BTreeMap<usize, f64>,
    pub r_at_bwd: std::collections::BTreeMap<usize, f64>,
    pub mdr_fwd: f64,
    pub mdr_bwd: f64,
    pub mnr_fwd: f64,
    pub mnr_bwd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<ValMetrics>,
}

#[derive(Debug, Clone)]
pub struct StepMetrics {
    pub loss: f64,
}

impl TrainState {
    pub fn new(config: TrainConfig, d_x: usize, d_y: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let build = |d_in: usize, rng: &mut ChaCha20Rng| match config.hidden_dim {
            Some(h) => EncoderParams::mlp(d_in, h, config.embed_dim, rng),
            None => EncoderParams::linear(d_in, config.embed_dim, rng),
        };
        let enc_x = build(d_x, &mut rng);
        let enc_y = build(d_y, &mut rng);
        let opt_x = Optimizer::new(config.optimizer, enc_x.param_count(), config.momentum);
        let opt_y = Optimizer::new(config.optimizer, enc_y.param_count(), config.momentum);
        let queue = MemoryQueue::new(config.queue_capacity, d_x, d_y);
        Ok(Self {
            config,
            enc_x,
            enc_y,
            opt_x,
            opt_y,
            queue,
            epoch: 0,
            step: 0,
            lr: 0.0,
            best_val: f64::NEG_INFINITY,
            epochs_since_best: 0,
            cooldown_remaining: 0,
            rng,
        })
        .map(|mut s| {
            s.lr = s.config.lr;
            s
        })
    }

    /// Warmup ramps linearly from lr/10 to the (possibly decayed) base lr.
    pub fn effective_lr(&self) -> f64 {
        let w = self.config.warmup_epochs;
        if w > 0 && self.epoch < w {
            self.lr * (0.1 + 0.9 * self.epoch as f64 / w as f64)
        } else {
            self.lr
        }
    }

    fn loss_for_batch(
        &mut self,
        zx: &EmbeddingBatch,
        zy: &EmbeddingBatch,
        in_x: &EmbeddingBatch,
        in_y: &EmbeddingBatch,
    ) -> Result<LossOutput> {
        let cfg = &self.config.loss;
        match self.config.loss_kind {
            LossKind::Crossclr => {
                self.queue.enqueue(in_x, in_y)?;
                crossclr_queue(
                    zx,
                    zy,
                    in_x,
                    in_y,
                    &self.queue,
                    &self.enc_x,
                    &self.enc_y,
                    cfg,
                )
            }
            LossKind::CrossclrBatch => crossclr_batch(zx, zy, in_x, in_y, cfg),
            LossKind::CrossclrMultipos => crossclr_multipos(zx, zy, in_x, in_y, cfg),
            LossKind::Ntxent => ntxent(zx, zy, cfg.tau),
            LossKind::ClipSymmetric => clip_symmetric(zx, zy, cfg.tau),
            LossKind::MaxMargin => max_margin(zx, zy, cfg.margin),
        }
    }

    /// One optimizer update on a paired batch (Alg. 1 body: enqueue, encode,
    /// loss, update).
    pub fn train_step(&mut self, in_x: &EmbeddingBatch, in_y: &EmbeddingBatch) -> Result<StepMetrics> {
        let (zx, cache_x) = self.enc_x.forward_cache(in_x)?;
        let (zy, cache_y) = self.enc_y.forward_cache(in_y)?;
        let out = self.loss_for_batch(&zx, &zy, in_x, in_y)?;

        let grads_x = flatten_grads(&self.enc_x.backward(&cache_x, &out.grad_zx));
        let grads_y = flatten_grads(&self.enc_y.backward(&cache_y, &out.grad_zy));
        let lr = self.effective_lr();

        let mut flat_x = self.enc_x.flatten();
        self.opt_x.step(&mut flat_x, &grads_x, lr);
        self.enc_x.unflatten_into(&flat_x);

        let mut flat_y = self.enc_y.flatten();
        self.opt_y.step(&mut flat_y, &grads_y, lr);
        self.enc_y.unflatten_into(&flat_y);

        self.step += 1;
        Ok(StepMetrics { loss: out.value })
    }

    fn gather(data: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((idx.len(), data.ncols()));
        for (row, &i) in idx.iter().enumerate() {
            out.row_mut(row).assign(&data.row(i));
        }
        out
    }

    pub fn validate_retrieval(&self, ds: &PairedEmbeddingDataset) -> Result<Option<ValMetrics>> {
        if ds.split_len(Split::Val) == 0 {
            return Ok(None);
        }
        let (vx, vy) = ds.split(Split::Val)?;
        let zx = self.enc_x.forward(&vx)?;
        let zy = self.enc_y.forward(&vy)?;
        let n = zx.n();
        let ks: Vec<usize> = [1, 5, 10].into_iter().filter(|&k| k <= n).collect();
        let (fwd, bwd) = evaluate_retrieval(&zx, &zy, &ks)?;
        Ok(Some(ValMetrics {
            r1_sum: fwd.r_at[&1] + bwd.r_at[&1],
            r_at_fwd: fwd.r_at,
            r_at_bwd: bwd.r_at,
            mdr_fwd: fwd.mdr,
            mdr_bwd: bwd.mdr,
            mnr_fwd: fwd.mnr,
            mnr_bwd: bwd.mnr,
        }))
    }

    fn end_of_epoch(&mut self, val: Option<&ValMetrics>) {
        if let Some(v) = val {
            let improved = v.r1_sum > self.best_val;
            if improved {
                self.best_val = v.r1_sum;
                self.epochs_since_best = 0;
            } else if self.cooldown_remaining > 0 {
                self.cooldown_remaining -= 1;
            } else {
                self.epochs_since_best += 1;
                if self.epochs_since_best >= self.config.plateau_patience {
                    self.lr *= self.config.lr_decay_factor;
                    self.epochs_since_best = 0;
                    self.cooldown_remaining = self.config.plateau_cooldown;
                }
            }
        }
        self.epoch += 1;
    }

    /// One full pass over the train split in a fresh shuffled order, then
    /// validation and the plateau rule.
    pub fn run_epoch(&mut self, ds: &PairedEmbeddingDataset) -> Result<EpochLog> {
        let (tx, ty) = ds.split(Split::Train)?;
        let n = tx.n();
        let bs = self.config.batch_size;
        if n < bs {
            return Err(Error::EmptyDataset(format!(
                "train split of {n} rows is smaller than one batch of {bs}"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);

        let lr = self.effective_lr();
        let mut total = 0.0;
        let mut batches = 0usize;
        // last partial batch dropped: fixed batch size keeps queue semantics
        for chunk in order.chunks_exact(bs) {
            let bx = EmbeddingBatch::new(Self::gather(tx.data(), chunk))?;
            let by = EmbeddingBatch::new(Self::gather(ty.data(), chunk))?;
            let metrics = self.train_step(&bx, &by)?;
            total += metrics.loss;
            batches += 1;
        }
        let val = self.validate_retrieval(ds)?;
        let log = EpochLog {
            epoch: self.epoch,
            lr,
            train_loss: total / batches as f64,
            val: val.clone(),
        };
        self.end_of_epoch(val.as_ref());
        Ok(log)
    }
}

/// Trains a fresh state for `config.epochs` epochs.
pub fn fit(config: TrainConfig, ds: &PairedEmbeddingDataset) -> Result<(TrainState, Vec<EpochLog>)> {
    if ds.split_len(Split::Train) == 0 {
        return Err(Error::EmptyDataset("train split is empty".into()));
    }
    let mut state = TrainState::new(config, ds.x.ncols(), ds.y.ncols())?;
    let mut logs = Vec::with_capacity(state.config.epochs);
    for _ in 0..state.config.epochs {
        logs.push(state.run_epoch(ds)?);
    }
    Ok((state, logs))
}
