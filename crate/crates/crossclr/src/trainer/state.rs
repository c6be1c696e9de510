//! Binary checkpointing of the full training state, including optimizer
//! moments, queue contents and the rng position, so a resumed run replays
//! the identical trajectory.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::embedding::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::queue::MemoryQueue;

use super::encoder::{EncoderParams, Layer};
use super::optim::Optimizer;
use super::{TrainConfig, TrainState};

const MAGIC: [u8; 4] = *b"XCKP";
const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64_slice(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.f64(*x);
        }
    }

    fn bytes(&mut self, v: &[u8]) {
        self.u64(v.len() as u64);
        self.buf.extend_from_slice(v);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let slice = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or(Error::TruncatedFile {
                offset: self.pos as u64,
            })?;
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.f64()?);
        }
        Ok(out)
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
}

fn write_encoder(w: &mut Writer, enc: &EncoderParams) {
    w.u32(enc.layers.len() as u32);
    for layer in &enc.layers {
        w.u32(layer.w.nrows() as u32);
        w.u32(layer.w.ncols() as u32);
        for v in layer.w.iter() {
            w.f64(*v);
        }
        w.f64_slice(&layer.b);
    }
}

fn read_encoder(r: &mut Reader<'_>) -> Result<EncoderParams> {
    let n_layers = r.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let mut w = Array2::zeros((rows, cols));
        for v in w.iter_mut() {
            *v = r.f64()?;
        }
        let b = r.f64_vec()?;
        if b.len() != rows {
            return Err(Error::ManifestMismatch(format!(
                "bias of length {} against {rows} output rows",
                b.len()
            )));
        }
        layers.push(Layer { w, b });
    }
    if layers.is_empty() {
        return Err(Error::ManifestMismatch("encoder with no layers".into()));
    }
    Ok(EncoderParams { layers })
}

fn write_optimizer(w: &mut Writer, opt: &Optimizer) {
    match opt {
        Optimizer::Adam {
            beta1,
            beta2,
            eps,
            m,
            v,
            t,
        } => {
            w.u32(0);
            w.f64(*beta1);
            w.f64(*beta2);
            w.f64(*eps);
            w.u64(*t);
            w.f64_slice(m);
            w.f64_slice(v);
        }
        Optimizer::SgdMomentum { momentum, velocity } => {
            w.u32(1);
            w.f64(*momentum);
            w.f64_slice(velocity);
        }
    }
}

fn read_optimizer(r: &mut Reader<'_>) -> Result<Optimizer> {
    match r.u32()? {
        0 => Ok(Optimizer::Adam {
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
            t: r.u64()?,
            m: r.f64_vec()?,
            v: r.f64_vec()?,
        }),
        1 => Ok(Optimizer::SgdMomentum {
            momentum: r.f64()?,
            velocity: r.f64_vec()?,
        }),
        tag => Err(Error::ManifestMismatch(format!(
            "unknown optimizer tag {tag}"
        ))),
    }
}

fn write_queue(w: &mut Writer, queue: &MemoryQueue) -> Result<()> {
    let (dx, dy) = queue.dims();
    w.u64(queue.capacity() as u64);
    w.u32(dx as u32);
    w.u32(dy as u32);
    w.u64(queue.len() as u64);
    if !queue.is_empty() {
        let (x, y) = queue.snapshot()?;
        for i in 0..x.n() {
            for v in x.row(i) {
                w.f64(*v);
            }
            for v in y.row(i) {
                w.f64(*v);
            }
        }
    }
    Ok(())
}

fn read_queue(r: &mut Reader<'_>) -> Result<MemoryQueue> {
    let capacity = r.u64()? as usize;
    let dx = r.u32()? as usize;
    let dy = r.u32()? as usize;
    let len = r.u64()? as usize;
    let mut queue = MemoryQueue::new(capacity, dx, dy);
    for _ in 0..len {
        let mut xr = vec![0.0; dx];
        for v in xr.iter_mut() {
            *v = r.f64()?;
        }
        let mut yr = vec![0.0; dy];
        for v in yr.iter_mut() {
            *v = r.f64()?;
        }
        let x = EmbeddingBatch::from_rows(&[xr])?;
        let y = EmbeddingBatch::from_rows(&[yr])?;
        queue.enqueue(&x, &y)?;
    }
    Ok(queue)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(&MAGIC);
    w.u32(VERSION);
    w.bytes(serde_json::to_string(&state.config)?.as_bytes());
    write_encoder(&mut w, &state.enc_x);
    write_encoder(&mut w, &state.enc_y);
    write_optimizer(&mut w, &state.opt_x);
    write_optimizer(&mut w, &state.opt_y);
    write_queue(&mut w, &state.queue)?;
    w.u64(state.epoch as u64);
    w.u64(state.step);
    w.f64(state.lr);
    w.f64(state.best_val);
    w.u64(state.epochs_since_best as u64);
    w.u64(state.cooldown_remaining as u64);
    w.buf.extend_from_slice(&state.rng.get_seed());
    w.buf.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    fs::write(path, &w.buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: VERSION,
        });
    }
    let config: TrainConfig = serde_json::from_slice(r.bytes()?)?;
    let enc_x = read_encoder(&mut r)?;
    let enc_y = read_encoder(&mut r)?;
    let opt_x = read_optimizer(&mut r)?;
    let opt_y = read_optimizer(&mut r)?;
    let queue = read_queue(&mut r)?;
    let epoch = r.u64()? as usize;
    let step = r.u64()?;
    let lr = r.f64()?;
    let best_val = r.f64()?;
    let epochs_since_best = r.u64()? as usize;
    let cooldown_remaining = r.u64()? as usize;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let mut rng = ChaCha20Rng::from_seed(seed);
    rng.set_word_pos(word_pos);
    if r.pos != bytes.len() {
        return Err(Error::ManifestMismatch(format!(
            "{} trailing bytes in checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok(TrainState {
        config,
        enc_x,
        enc_y,
        opt_x,
        opt_y,
        queue,
        epoch,
        step,
        lr,
        best_val,
        epochs_since_best,
        cooldown_remaining,
        rng,
    })
}
