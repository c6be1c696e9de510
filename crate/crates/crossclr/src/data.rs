//! Synthetic paired-modality datasets and their on-disk form: one little-
//! endian f32 binary file per modality plus a JSON manifest. Values are
//! quantized to f32 at generation time so save/load round-trips are
//! bit-exact.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingBatch;
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"XEMB";
const FORMAT_VERSION: u32 = 1;

/// Half-open row ranges for the three standard splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
}

impl SplitRanges {
    pub fn all_train(n: usize) -> Self {
        Self {
            train: (0, n),
            val: (n, n),
            test: (n, n),
        }
    }

    /// Consecutive train/val/test blocks; counts must sum to at most n.
    pub fn consecutive(n: usize, train: usize, val: usize) -> Result<Self> {
        if train + val > n {
            return Err(Error::InvalidShape(format!(
                "split sizes {train}+{val} exceed {n} rows"
            )));
        }
        Ok(Self {
            train: (0, train),
            val: (train, train + val),
            test: (train + val, n),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone)]
pub struct PairedEmbeddingDataset {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    /// Generator provenance; absent on ingested data without labels.
    pub cluster_id: Option<Vec<u32>>,
    pub splits: SplitRanges,
}

impl PairedEmbeddingDataset {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    fn range(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => self.splits.train,
            Split::Val => self.splits.val,
            Split::Test => self.splits.test,
        }
    }

    pub fn split_len(&self, split: Split) -> usize {
        let (a, b) = self.range(split);
        b - a
    }

    /// Paired batches for one split.
    pub fn split(&self, split: Split) -> Result<(EmbeddingBatch, EmbeddingBatch)> {
        let (a, b) = self.range(split);
        if a == b {
            return Err(Error::EmptyDataset(format!("{split:?} split is empty")));
        }
        let x = self.x.slice(ndarray::s![a..b, ..]).to_owned();
        let y = self.y.slice(ndarray::s![a..b, ..]).to_owned();
        Ok((EmbeddingBatch::new(x)?, EmbeddingBatch::new(y)?))
    }

    pub fn split_cluster_ids(&self, split: Split) -> Option<&[u32]> {
        let (a, b) = self.range(split);
        self.cluster_id.as_ref().map(|ids| &ids[a..b])
    }
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Draws paired embeddings from shared latent cluster centers.
///
/// Centers live on the unit sphere; `overlap` pulls them toward their common
/// mean (1.0 collapses all clusters), `noise_sigma` spreads samples around
/// their center, and two fixed seeded linear maps produce the two modality
/// views. Deterministic per seed; entries are f32-quantized.
pub fn generate_synthetic(
    n_pairs: usize,
    n_clusters: usize,
    d_x: usize,
    d_y: usize,
    noise_sigma: f64,
    overlap: f64,
    seed: u64,
) -> Result<PairedEmbeddingDataset> {
    if n_pairs == 0 || n_clusters == 0 || n_clusters > n_pairs {
        return Err(Error::InvalidShape(format!(
            "need 1 <= n_clusters <= n_pairs, got {n_clusters} clusters, {n_pairs} pairs"
        )));
    }
    if d_x < 2 || d_y < 2 {
        return Err(Error::InvalidShape(format!(
            "modality dims must be >= 2, got ({d_x}, {d_y})"
        )));
    }
    if !(0.0..=1.0).contains(&overlap) {
        return Err(Error::InvalidShape(format!(
            "overlap must be in [0, 1], got {overlap}"
        )));
    }
    if noise_sigma < 0.0 {
        return Err(Error::InvalidShape(format!(
            "noise_sigma must be >= 0, got {noise_sigma}"
        )));
    }

    let d_latent = d_x.min(d_y);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha20Rng| -> f64 { rng.sample(StandardNormal) };

    // unit-sphere centers, then pulled toward their mean and re-normalized
    let mut centers = Array2::zeros((n_clusters, d_latent));
    for mut row in centers.rows_mut() {
        let mut norm = 0.0;
        for v in row.iter_mut() {
            *v = normal(&mut rng);
            norm += *v * *v;
        }
        let norm = norm.sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
    }
    let mean_center: Vec<f64> = (0..d_latent)
        .map(|j| centers.column(j).sum() / n_clusters as f64)
        .collect();
    for mut row in centers.rows_mut() {
        let mut norm = 0.0;
        for (v, m) in row.iter_mut().zip(&mean_center) {
            *v = (1.0 - overlap) * *v + overlap * m;
            norm += *v * *v;
        }
        let norm = norm.sqrt().max(1e-12);
        row.mapv_inplace(|v| v / norm);
    }

    // fixed random modality maps, scaled to keep row magnitudes O(1)
    let scale = 1.0 / (d_latent as f64).sqrt();
    let map_x = Array2::from_shape_fn((d_latent, d_x), |_| normal(&mut rng) * scale);
    let map_y = Array2::from_shape_fn((d_latent, d_y), |_| normal(&mut rng) * scale);

    let mut x = Array2::zeros((n_pairs, d_x));
    let mut y = Array2::zeros((n_pairs, d_y));
    let mut cluster_id = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let c = (i % n_clusters) as u32;
        cluster_id.push(c);
        let mut latent: Vec<f64> = centers.row(c as usize).to_vec();
        if noise_sigma > 0.0 {
            for v in latent.iter_mut() {
                *v += noise_sigma * normal(&mut rng);
            }
        }
        for j in 0..d_x {
            let mut acc = 0.0;
            for (k, l) in latent.iter().enumerate() {
                acc += l * map_x[[k, j]];
            }
            x[[i, j]] = quantize(acc);
        }
        for j in 0..d_y {
            let mut acc = 0.0;
            for (k, l) in latent.iter().enumerate() {
                acc += l * map_y[[k, j]];
            }
            y[[i, j]] = quantize(acc);
        }
    }

    Ok(PairedEmbeddingDataset {
        x,
        y,
        cluster_id: Some(cluster_id),
        splits: SplitRanges::all_train(n_pairs),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    n: usize,
    /// One or more files per modality; multiple files are concatenated
    /// feature-wise at load and each row re-normalized afterwards.
    x_files: Vec<String>,
    x_dims: Vec<usize>,
    y_files: Vec<String>,
    y_dims: Vec<usize>,
    splits: SplitRanges,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cluster_id: Option<Vec<u32>>,
}

fn write_xemb(path: &Path, data: &Array2<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + data.len() * 4);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(data.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(data.ncols() as u32).to_le_bytes());
    for v in data.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_xemb(path: &Path) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let need = |offset: usize, len: usize| -> Result<&[u8]> {
        bytes.get(offset..offset + len).ok_or(Error::TruncatedFile {
            offset: offset as u64,
        })
    };
    let magic: [u8; 4] = need(0, 4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(need(4, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let n = u32::from_le_bytes(need(8, 4)?.try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(need(12, 4)?.try_into().unwrap()) as usize;
    need(16, n * d * 4)?;
    if bytes.len() > 16 + n * d * 4 {
        return Err(Error::ManifestMismatch(format!(
            "{} trailing bytes after {n}x{d} payload in {}",
            bytes.len() - 16 - n * d * 4,
            path.display()
        )));
    }
    let mut data = Array2::zeros((n, d));
    for i in 0..n {
        for j in 0..d {
            let off = 16 + (i * d + j) * 4;
            let raw: [u8; 4] = bytes[off..off + 4].try_into().unwrap();
            data[[i, j]] = f32::from_le_bytes(raw) as f64;
        }
    }
    Ok(data)
}

/// Writes `manifest.json`, `x.xemb` and `y.xemb` under `dir`.
pub fn save_dataset(ds: &PairedEmbeddingDataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    write_xemb(&dir.join("x.xemb"), &ds.x)?;
    write_xemb(&dir.join("y.xemb"), &ds.y)?;
    let manifest = Manifest {
        version: FORMAT_VERSION,
        n: ds.n(),
        x_files: vec!["x.xemb".into()],
        x_dims: vec![ds.x.ncols()],
        y_files: vec!["y.xemb".into()],
        y_dims: vec![ds.y.ncols()],
        splits: ds.splits,
        cluster_id: ds.cluster_id.clone(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

fn load_modality(dir: &Path, files: &[String], dims: &[usize], n: usize) -> Result<Array2<f64>> {
    if files.is_empty() || files.len() != dims.len() {
        return Err(Error::ManifestMismatch(format!(
            "{} files listed against {} dims",
            files.len(),
            dims.len()
        )));
    }
    let mut parts = Vec::with_capacity(files.len());
    for (file, &dim) in files.iter().zip(dims) {
        let data = read_xemb(&dir.join(file))?;
        if data.nrows() != n {
            return Err(Error::ManifestMismatch(format!(
                "manifest says {n} rows, {file} holds {}",
                data.nrows()
            )));
        }
        if data.ncols() != dim {
            return Err(Error::ManifestMismatch(format!(
                "manifest says {dim} columns for {file}, file holds {}",
                data.ncols()
            )));
        }
        parts.push(data);
    }
    if parts.len() == 1 {
        return Ok(parts.pop().unwrap());
    }
    // feature-wise concatenation, then per-row re-normalization
    let total: usize = dims.iter().sum();
    let mut out = Array2::zeros((n, total));
    for i in 0..n {
        let mut col = 0;
        for part in &parts {
            for j in 0..part.ncols() {
                out[[i, col]] = part[[i, j]];
                col += 1;
            }
        }
        let norm = out.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= 1e-12 {
            return Err(Error::ZeroVectorRow(i));
        }
        out.row_mut(i).mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

/// Loads a dataset from its manifest (or a directory containing
/// `manifest.json`).
pub fn load_dataset(path: &Path) -> Result<PairedEmbeddingDataset> {
    let manifest_path = if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    };
    let dir = manifest_path
        .parent()
        .ok_or_else(|| Error::PathError(format!("no parent directory for {}", manifest_path.display())))?
        .to_path_buf();
    let text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::PathError(format!("{}: {e}", manifest_path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::ManifestMismatch(format!("bad manifest: {e}")))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.version,
            supported: FORMAT_VERSION,
        });
    }
    if let Some(ids) = &manifest.cluster_id {
        if ids.len() != manifest.n {
            return Err(Error::ManifestMismatch(format!(
                "{} cluster labels for {} rows",
                ids.len(),
                manifest.n
            )));
        }
    }
    let for_bounds = [
        manifest.splits.train,
        manifest.splits.val,
        manifest.splits.test,
    ];
    for (a, b) in for_bounds {
        if a > b || b > manifest.n {
            return Err(Error::ManifestMismatch(format!(
                "split range ({a}, {b}) out of bounds for {} rows",
                manifest.n
            )));
        }
    }
    let x = load_modality(&dir, &manifest.x_files, &manifest.x_dims, manifest.n)?;
    let y = load_modality(&dir, &manifest.y_files, &manifest.y_dims, manifest.n)?;
    Ok(PairedEmbeddingDataset {
        x,
        y,
        cluster_id: manifest.cluster_id,
        splits: manifest.splits,
    })
}
