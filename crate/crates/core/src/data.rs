//! Dataset ingestion: IDX and CSV loaders, synthetic generators, seeded
//! batching, splits, and feature standardization.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labeled samples. Features are stored in `f64` and cast into the training
/// dtype at batch time.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[N, ...feature dims]`
    pub features: Tensor<f64>,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Per-feature (mean, scale) applied to this dataset, if standardized.
    pub normalization: Option<Normalization>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Dataset {
    pub fn new(features: Tensor<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let n = features.rows();
        if n == 0 {
            return Err(Error::Input(
                "dataset must contain at least one sample".into(),
            ));
        }
        if labels.len() != n {
            return Err(Error::Input(format!(
                "{} labels for {n} samples",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            classes,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dims(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Select samples by index, preserving order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Input("cannot build an empty dataset subset".into()));
        }
        Ok(Self {
            features: self.features.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            normalization: self.normalization.clone(),
        })
    }

    /// Deterministic split into (first, second) with `second_len` samples in
    /// the second part, drawn from a seeded permutation.
    pub fn split(&self, second_len: usize, seed: u64) -> Result<(Self, Self)> {
        if second_len == 0 || second_len >= self.len() {
            return Err(Error::Input(format!(
                "split size {second_len} invalid for {} samples",
                self.len()
            )));
        }
        let perm = seeded_permutation(self.len(), seed);
        let (second, first) = perm.split_at(second_len);
        Ok((self.subset(first)?, self.subset(second)?))
    }
}

/// Standardization fitted on one dataset (the train split) so it can be
/// applied unchanged to validation and test data.
pub fn fit_standardization(train: &Dataset) -> Normalization {
    let n = train.len() as f64;
    let width = train.features.row_width();
    let mut mean = vec![0.0; width];
    for i in 0..train.len() {
        for (m, &v) in mean.iter_mut().zip(train.features.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; width];
    for i in 0..train.len() {
        for (s, (&v, &m)) in var.iter_mut().zip(train.features.row(i).iter().zip(&mean)) {
            let d = v - m;
            *s += d * d;
        }
    }
    let scale = var
        .iter()
        .map(|&s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    Normalization { mean, scale }
}

pub fn apply_standardization(dataset: &mut Dataset, norm: &Normalization) {
    let width = dataset.features.row_width();
    assert_eq!(width, norm.mean.len());
    let n = dataset.len();
    let data = dataset.features.data_mut();
    for i in 0..n {
        for j in 0..width {
            let v = &mut data[i * width + j];
            *v = (*v - norm.mean[j]) / norm.scale[j];
        }
    }
    dataset.normalization = Some(norm.clone());
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxReader {
    bytes: Vec<u8>,
    offset: usize,
    path: String,
}

impl IdxReader {
    fn open(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Ok(Self {
            bytes,
            offset: 0,
            path: path.display().to_string(),
        })
    }

    fn read_u32_be(&mut self) -> Result<u32> {
        if self.offset + 4 > self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated at byte offset {}",
                self.path, self.offset
            )));
        }
        let v = u32::from_be_bytes(self.bytes[self.offset..self.offset + 4].try_into().unwrap());
        self.offset += 4;
        Ok(v)
    }

    fn read_bytes(&mut self, n: usize) -> Result<&[u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "{}: truncated at byte offset {} (needed {n} more bytes)",
                self.path, self.offset
            )));
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }
}

/// Load big-endian IDX image/label pairs; pixel bytes are scaled to `[0, 1]`
/// and images come out shaped `[N, 1, H, W]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut img = IdxReader::open(images_path)?;
    let magic = img.read_u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad image magic {magic:#010x} at byte offset 0 (expected {IDX_IMAGES_MAGIC:#010x})",
            img.path
        )));
    }
    let n = img.read_u32_be()? as usize;
    if n == 0 {
        return Err(Error::Input(format!("{}: image count is zero", img.path)));
    }
    let h = img.read_u32_be()? as usize;
    let w = img.read_u32_be()? as usize;
    let pixel_count = h
        .checked_mul(w)
        .and_then(|hw| hw.checked_mul(n))
        .filter(|&count| count <= img.bytes.len() - img.offset)
        .ok_or_else(|| {
            Error::Format(format!(
                "{}: header claims {n} images of {h}x{w}, larger than the file",
                img.path
            ))
        })?;
    let pixels = img.read_bytes(pixel_count)?;
    let features: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();

    let mut lab = IdxReader::open(labels_path)?;
    let magic = lab.read_u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad label magic {magic:#010x} at byte offset 0 (expected {IDX_LABELS_MAGIC:#010x})",
            lab.path
        )));
    }
    let ln = lab.read_u32_be()? as usize;
    if ln != n {
        return Err(Error::Format(format!(
            "{}: {ln} labels for {n} images",
            lab.path
        )));
    }
    let raw = lab.read_bytes(n)?.to_vec();
    let labels: Vec<usize> = raw.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().unwrap() + 1;
    Dataset::new(Tensor::new(vec![n, 1, h, w], features)?, labels, classes)
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

/// Load a headered numeric CSV; the label column may hold arbitrary strings,
/// densified to `0..K-1` by first appearance.
pub fn load_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut text = String::new();
    File::open(path)
        .map_err(|e| Error::Input(format!("cannot open {}: {e}", path.display())))?
        .read_to_string(&mut text)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty file", path.display())))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let label_idx = columns
        .iter()
        .position(|&c| c == label_column)
        .ok_or_else(|| {
            Error::Input(format!(
                "{}: label column {label_column:?} not found in header",
                path.display()
            ))
        })?;

    let mut features = Vec::new();
    let mut label_names: Vec<String> = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0usize;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != columns.len() {
            return Err(Error::Format(format!(
                "{}: line {}: {} cells, expected {}",
                path.display(),
                lineno + 1,
                cells.len(),
                columns.len()
            )));
        }
        for (i, cell) in cells.iter().enumerate() {
            if i == label_idx {
                let id = match label_names.iter().position(|n| n == cell) {
                    Some(id) => id,
                    None => {
                        label_names.push(cell.to_string());
                        label_names.len() - 1
                    }
                };
                labels.push(id);
            } else {
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Format(format!(
                        "{}: line {}: non-numeric cell {cell:?} in column {}",
                        path.display(),
                        lineno + 1,
                        columns[i]
                    ))
                })?;
                features.push(v);
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Input(format!("{}: no data rows", path.display())));
    }
    let width = columns.len() - 1;
    let classes = label_names.len();
    Dataset::new(Tensor::new(vec![rows, width], features)?, labels, classes)
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    Blobs,
    Spirals,
}

/// Class centers for blobs: evenly spaced on the unit circle, with the
/// two-class case placed at (-1, 0) and (1, 0).
pub fn blob_centers(classes: usize) -> Vec<[f64; 2]> {
    (0..classes)
        .map(|c| {
            let angle = std::f64::consts::PI * (1.0 - 2.0 * c as f64 / classes as f64);
            [angle.cos(), angle.sin()]
        })
        .collect()
}

/// Deterministic 2-D synthetic datasets: Gaussian blobs at fixed centers or
/// interleaved spiral arcs with added noise.
pub fn gen_synthetic(
    kind: SyntheticKind,
    n_per_class: usize,
    classes: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::Input("n_per_class must be at least 1".into()));
    }
    if classes < 2 {
        return Err(Error::Input(
            "synthetic datasets need at least 2 classes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = n_per_class * classes;
    let mut features = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    match kind {
        SyntheticKind::Blobs => {
            let centers = blob_centers(classes);
            for (c, center) in centers.iter().enumerate() {
                for _ in 0..n_per_class {
                    let (gx, gy) = (gaussian(&mut rng), gaussian(&mut rng));
                    features.push(center[0] + noise * gx);
                    features.push(center[1] + noise * gy);
                    labels.push(c);
                }
            }
        }
        SyntheticKind::Spirals => {
            const TURNS: f64 = 1.75;
            for c in 0..classes {
                let phase = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
                for i in 0..n_per_class {
                    let t = if n_per_class == 1 {
                        1.0
                    } else {
                        i as f64 / (n_per_class - 1) as f64
                    };
                    let radius = 0.1 + 0.9 * t;
                    let angle = phase + t * TURNS * 2.0 * std::f64::consts::PI;
                    let (gx, gy) = (gaussian(&mut rng), gaussian(&mut rng));
                    features.push(radius * angle.cos() + noise * gx);
                    features.push(radius * angle.sin() + noise * gy);
                    labels.push(c);
                }
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, 2], features)?, labels, classes)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller on open intervals keeps the log finite.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Mix an epoch (or other stream index) into a base seed.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One minibatch: row indices into the parent dataset.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
}

/// Seeded shuffled batches covering every index exactly once; the final
/// partial batch is included, so `ceil(N / batch_size)` batches total.
pub fn batch_iter(dataset: &Dataset, batch_size: usize, shuffle_seed: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Input("batch size must be at least 1".into()));
    }
    let perm = seeded_permutation(dataset.len(), shuffle_seed);
    Ok(perm
        .chunks(batch_size)
        .map(|chunk| Batch {
            indices: chunk.to_vec(),
        })
        .collect())
}

/// Materialize batch features in the requested dtype alongside labels.
pub fn batch_features<R: crate::tensor::Real>(
    dataset: &Dataset,
    batch: &Batch,
) -> (Tensor<R>, Vec<usize>) {
    let x = dataset.features.gather_rows(&batch.indices).cast::<R>();
    let y = batch.indices.iter().map(|&i| dataset.labels[i]).collect();
    (x, y)
}
