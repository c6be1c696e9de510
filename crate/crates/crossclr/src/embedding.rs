//! Embedding containers, l2 normalization and the temperature-scaled
//! similarity kernel shared by every loss.
//!
//! All math is done in f64. Dot products reduce strictly left to right so
//! results are bit-reproducible regardless of batch layout.

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

const ZERO_NORM_EPS: f64 = 1e-12;

/// Sequential left-to-right dot product. The fixed reduction order makes
/// similarity matrices bit-reproducible.
pub(crate) fn dot(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

pub(crate) fn row_norm(a: ArrayView1<'_, f64>) -> f64 {
    dot(a, a).sqrt()
}

/// Which modality a set of rows came from. Purely a label carried on
/// similarity matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    A,
    B,
}

/// A batch of N row embeddings of a single modality.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch {
    data: Array2<f64>,
    normalized: bool,
}

impl EmbeddingBatch {
    /// Wraps an N x D matrix. Rows are not assumed unit-norm.
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.nrows() < 1 || data.ncols() < 1 {
            return Err(Error::InvalidShape(format!(
                "batch must be at least 1x1, got {}x{}",
                data.nrows(),
                data.ncols()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidShape("non-finite entry in batch".into()));
        }
        Ok(Self {
            data,
            normalized: false,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidShape("empty row list".into()));
        }
        let dim = rows[0].len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidShape("ragged row list".into()));
        }
        let mut data = Array2::zeros((rows.len(), dim));
        for (i, r) in rows.iter().enumerate() {
            for (j, v) in r.iter().enumerate() {
                data[[i, j]] = *v;
            }
        }
        Self::new(data)
    }

    pub(crate) fn from_normalized(data: Array2<f64>) -> Self {
        Self {
            data,
            normalized: true,
        }
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.data.row(i)
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Divides each row by its Euclidean norm. Idempotent: a batch already
    /// flagged normalized is returned unchanged.
    pub fn l2_normalize(&self) -> Result<EmbeddingBatch> {
        if self.normalized {
            return Ok(self.clone());
        }
        let mut out = self.data.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let norm = row_norm(row.view());
            if norm <= ZERO_NORM_EPS {
                return Err(Error::ZeroVectorRow(i));
            }
            row.mapv_inplace(|v| v / norm);
        }
        Ok(EmbeddingBatch::from_normalized(out))
    }
}

/// Pairwise cosine similarity scores between two batches.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    pub scores: Array2<f64>,
    pub row_source: Modality,
    pub col_source: Modality,
}

/// scores[i][j] = <a_i, b_j> on the l2-normalized rows. Inputs that are not
/// flagged normalized are normalized internally.
pub fn cosine_similarity_matrix(
    a: &EmbeddingBatch,
    b: &EmbeddingBatch,
) -> Result<SimilarityMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "cosine similarity: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let an = a.l2_normalize()?;
    let bn = b.l2_normalize()?;
    let mut scores = Array2::zeros((an.n(), bn.n()));
    for i in 0..an.n() {
        for j in 0..bn.n() {
            scores[[i, j]] = dot(an.row(i), bn.row(j));
        }
    }
    Ok(SimilarityMatrix {
        scores,
        row_source: Modality::A,
        col_source: Modality::B,
    })
}

/// Entrywise exp(scores / tau), the delta kernel.
pub fn scaled_exp_sim(s: &SimilarityMatrix, tau: f64) -> Result<Array2<f64>> {
    if tau <= 0.0 {
        return Err(Error::NonPositiveTemperature(tau));
    }
    Ok(s.scores.mapv(|v| (v / tau).exp()))
}
