//! Small projection encoders: one or two linear layers with a gelu in
//! between, output rows l2-normalized.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::embedding::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::losses::Projector;

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// out x in.
    pub w: Array2<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn uniform_init(d_in: usize, d_out: usize, rng: &mut ChaCha20Rng) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((d_out, d_in), |_| rng.gen_range(-bound..bound)),
            b: vec![0.0; d_out],
        }
    }

    fn d_in(&self) -> usize {
        self.w.ncols()
    }

    fn d_out(&self) -> usize {
        self.w.nrows()
    }
}

/// A projection head of one or two layers. The gelu sits between layers only,
/// so a single-layer encoder is purely linear (plus the final
/// normalization).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub layers: Vec<Layer>,
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache {
    input: Array2<f64>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
    /// Final linear output, before normalization.
    raw_out: Array2<f64>,
    norms: Vec<f64>,
}

impl EncoderParams {
    pub fn linear(d_in: usize, d_out: usize, rng: &mut ChaCha20Rng) -> Self {
        Self {
            layers: vec![Layer::uniform_init(d_in, d_out, rng)],
        }
    }

    pub fn mlp(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut ChaCha20Rng) -> Self {
        Self {
            layers: vec![
                Layer::uniform_init(d_in, d_hidden, rng),
                Layer::uniform_init(d_hidden, d_out, rng),
            ],
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut w = Array2::zeros((d, d));
        for i in 0..d {
            w[[i, i]] = 1.0;
        }
        Self {
            layers: vec![Layer { w, b: vec![0.0; d] }],
        }
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().unwrap().d_out()
    }

    pub fn forward(&self, batch: &EmbeddingBatch) -> Result<EmbeddingBatch> {
        Ok(self.forward_cache(batch)?.0)
    }

    pub fn forward_cache(&self, batch: &EmbeddingBatch) -> Result<(EmbeddingBatch, ForwardCache)> {
        if batch.dim() != self.d_in() {
            return Err(Error::DimensionMismatch(format!(
                "encoder expects {} inputs, got {}",
                self.d_in(),
                batch.dim()
            )));
        }
        let n = batch.n();
        let mut act = batch.data().clone();
        let mut pre = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let mut out = Array2::zeros((n, layer.d_out()));
            for i in 0..n {
                for o in 0..layer.d_out() {
                    let mut acc = layer.b[o];
                    for k in 0..layer.d_in() {
                        acc += layer.w[[o, k]] * act[[i, k]];
                    }
                    out[[i, o]] = acc;
                }
            }
            pre.push(out.clone());
            if li + 1 < self.layers.len() {
                out.mapv_inplace(gelu);
            }
            act = out;
        }
        let raw_out = act.clone();
        let mut norms = Vec::with_capacity(n);
        for (i, mut row) in act.rows_mut().into_iter().enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= 1e-12 {
                return Err(Error::ZeroVectorRow(i));
            }
            row.mapv_inplace(|v| v / norm);
            norms.push(norm);
        }
        let cache = ForwardCache {
            input: batch.data().clone(),
            pre,
            raw_out,
            norms,
        };
        Ok((EmbeddingBatch::from_normalized(act), cache))
    }

    /// Backpropagates a gradient w.r.t. the normalized output into per-layer
    /// parameter gradients. The input gradient is discarded (inputs are
    /// data, not parameters).
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Array2<f64>) -> Vec<Layer> {
        let n = grad_out.nrows();
        // through the normalization: g_raw = (g - (g . z) z) / ||v||
        let mut grad = Array2::zeros(grad_out.raw_dim());
        for i in 0..n {
            let norm = cache.norms[i];
            let raw = cache.raw_out.row(i);
            let g = grad_out.row(i);
            let mut dot_gz = 0.0;
            for k in 0..raw.len() {
                dot_gz += g[k] * raw[k] / norm;
            }
            let mut row = grad.row_mut(i);
            for k in 0..raw.len() {
                row[k] = (g[k] - dot_gz * raw[k] / norm) / norm;
            }
        }

        let mut out = Vec::with_capacity(self.layers.len());
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            // activation that fed this layer
            let below: Array2<f64> = if li == 0 {
                cache.input.clone()
            } else {
                cache.pre[li - 1].mapv(gelu)
            };
            // grad is w.r.t. this layer's output after any nonlinearity;
            // the last layer has none
            let grad_pre = if li + 1 < self.layers.len() {
                let mut g = grad.clone();
                for i in 0..n {
                    for o in 0..layer.d_out() {
                        g[[i, o]] *= gelu_prime(cache.pre[li][[i, o]]);
                    }
                }
                g
            } else {
                grad.clone()
            };
            let mut gw = Array2::zeros((layer.d_out(), layer.d_in()));
            let mut gb = vec![0.0; layer.d_out()];
            for i in 0..n {
                for o in 0..layer.d_out() {
                    let g = grad_pre[[i, o]];
                    if g == 0.0 {
                        continue;
                    }
                    gb[o] += g;
                    for k in 0..layer.d_in() {
                        gw[[o, k]] += g * below[[i, k]];
                    }
                }
            }
            // gradient for the layer below
            if li > 0 {
                let mut gx = Array2::zeros((n, layer.d_in()));
                for i in 0..n {
                    for k in 0..layer.d_in() {
                        let mut acc = 0.0;
                        for o in 0..layer.d_out() {
                            acc += grad_pre[[i, o]] * layer.w[[o, k]];
                        }
                        gx[[i, k]] = acc;
                    }
                }
                grad = gx;
            }
            out.push(Layer { w: gw, b: gb });
        }
        out.reverse();
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.w.len() + l.b.len())
            .sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn unflatten_into(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count());
        let mut pos = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut() {
                *v = flat[pos];
                pos += 1;
            }
            for v in l.b.iter_mut() {
                *v = flat[pos];
                pos += 1;
            }
        }
    }
}

pub fn flatten_grads(grads: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in grads {
        out.extend(l.w.iter());
        out.extend(l.b.iter());
    }
    out
}

impl Projector for EncoderParams {
    fn project(&self, batch: &EmbeddingBatch) -> Result<EmbeddingBatch> {
        self.forward(batch)
    }
}
