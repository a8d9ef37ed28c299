//! Datasets: synthetic generators, IDX ingestion and the corruption probe.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generalist::EpochSource;
use crate::model::Batch;
use crate::numeric::{Matrix, RngStream};

/// Per-coordinate standard deviation of the synthetic blobs.
pub const BLOB_STD: f64 = 0.1;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    SyntheticGaussians,
    SyntheticRings,
    IdxFiles,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    pub name: String,
    pub train: Batch,
    pub test: Batch,
    pub d: usize,
    pub k: usize,
    pub provenance: Provenance,
}

impl DatasetHandle {
    pub fn class_counts(batch: &Batch, k: usize) -> Vec<usize> {
        let mut c = vec![0; k];
        for &l in &batch.labels {
            c[l] += 1;
        }
        c
    }
}

/// Shuffled minibatches of a fixed example set. The permutation for an
/// epoch depends only on `(seed, epoch)`, so a resumed run sees the same
/// order as an uninterrupted one.
#[derive(Debug, Clone, Copy)]
pub struct EpochPlan<'a> {
    pub data: &'a Batch,
    pub batch_size: usize,
    pub seed: u64,
}

/// Stream ids below this are reserved for per-epoch shuffles.
pub const SHUFFLE_STREAM_BASE: u64 = 1 << 32;

impl EpochSource for EpochPlan<'_> {
    fn epoch_batches(&self, epoch: usize) -> Vec<Batch> {
        let mut idx: Vec<usize> = (0..self.data.len()).collect();
        RngStream::new(self.seed, SHUFFLE_STREAM_BASE + epoch as u64).shuffle(&mut idx);
        idx.chunks(self.batch_size.max(1))
            .map(|chunk| self.data.select(chunk))
            .collect()
    }
}

fn class_means(d: usize, k: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    let r = separation / 2.0;
    if k == 2 {
        // along the main diagonal, `separation` apart
        let off = r / (d as f64).sqrt();
        if off > 0.5 {
            return Err(Error::Config(format!(
                "separation {separation} pushes class means outside the unit box"
            )));
        }
        return Ok(vec![vec![0.5 - off; d], vec![0.5 + off; d]]);
    }
    if k > 2 * d {
        return Err(Error::Config(format!("{k} classes need at least {} dimensions", k.div_ceil(2))));
    }
    if r > 0.5 {
        return Err(Error::Config(format!(
            "separation {separation} pushes class means outside the unit box"
        )));
    }
    Ok((0..k)
        .map(|c| {
            let mut m = vec![0.5; d];
            m[c / 2] += if c % 2 == 0 { -r } else { r };
            m
        })
        .collect())
}

fn sample_blobs(rng: &mut RngStream, n: usize, means: &[Vec<f64>], k: usize) -> Result<Batch> {
    let d = means[0].len();
    let mut rows = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        for m in &means[c] {
            rows.push((m + BLOB_STD * rng.normal()).clamp(0.0, 1.0));
        }
        labels.push(c);
    }
    Batch::new(Matrix::from_vec(n, d, rows)?, labels, k)
}

/// `k` isotropic Gaussian blobs with std [`BLOB_STD`], means `separation`
/// apart, clipped into the unit box. Classes are balanced.
pub fn gen_gaussians(seed: u64, n_train: usize, n_test: usize, d: usize, k: usize, separation: f64) -> Result<DatasetHandle> {
    if n_train == 0 || d == 0 || k < 2 {
        return Err(Error::Config(format!(
            "gaussian blobs need n > 0, d > 0, k >= 2 (got n={n_train}, d={d}, k={k})"
        )));
    }
    let means = class_means(d, k, separation)?;
    let mut rng = RngStream::new(seed, 0);
    let train = sample_blobs(&mut rng, n_train, &means, k)?;
    let test = sample_blobs(&mut rng, n_test, &means, k)?;
    Ok(DatasetHandle {
        name: format!("gaussians-d{d}-k{k}"),
        train,
        test,
        d,
        k,
        provenance: Provenance::SyntheticGaussians,
    })
}

/// Concentric noisy rings in the first two coordinates; any further
/// coordinates are uniform noise.
pub fn gen_rings(seed: u64, n_train: usize, n_test: usize, d: usize, k: usize) -> Result<DatasetHandle> {
    if n_train == 0 || d < 2 || k < 2 {
        return Err(Error::Config("rings need n > 0, d >= 2, k >= 2".into()));
    }
    let mut rng = RngStream::new(seed, 0);
    let mut sample = |n: usize| -> Result<Batch> {
        let mut rows = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % k;
            let radius = 0.45 * (c + 1) as f64 / k as f64;
            let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
            let jitter = 0.15 / k as f64 * rng.normal();
            rows.push((0.5 + (radius + jitter) * angle.cos()).clamp(0.0, 1.0));
            rows.push((0.5 + (radius + jitter) * angle.sin()).clamp(0.0, 1.0));
            for _ in 2..d {
                rows.push(rng.uniform());
            }
            labels.push(c);
        }
        Batch::new(Matrix::from_vec(n, d, rows)?, labels, k)
    };
    let train = sample(n_train)?;
    let test = sample(n_test)?;
    Ok(DatasetHandle {
        name: format!("rings-d{d}-k{k}"),
        train,
        test,
        d,
        k,
        provenance: Provenance::SyntheticRings,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let b = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            message: format!("truncated before {what}"),
        })?;
        self.pos = end;
        Ok(u32::from_be_bytes(b.try_into().expect("4 bytes")))
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format {
                offset: self.bytes.len() as u64,
                message: format!("{what} truncated: need {n} bytes from offset {}", self.pos),
            }),
        }
    }
}

fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<(Matrix, Vec<usize>)> {
    let mut img = Cursor { bytes: image_bytes, pos: 0 };
    let magic = img.u32("image magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("image magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        });
    }
    let n = img.u32("image count")? as usize;
    let rows = img.u32("row count")? as usize;
    let cols = img.u32("column count")? as usize;
    let pixels = img.take(n * rows * cols, "pixel data")?;
    let data: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();

    let mut lab = Cursor { bytes: label_bytes, pos: 0 };
    let magic = lab.u32("label magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("label magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        });
    }
    let m = lab.u32("label count")? as usize;
    if m != n {
        return Err(Error::Format {
            offset: 4,
            message: format!("{m} labels for {n} images"),
        });
    }
    let labels = lab.take(m, "label data")?.iter().map(|&l| l as usize).collect();
    Ok((Matrix::from_vec(n, rows * cols, data)?, labels))
}

/// Reads an IDX image/label file pair. Everything lands in `train`; the
/// `test` split is empty.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<DatasetHandle> {
    let (inputs, labels) = parse_idx(&std::fs::read(images_path)?, &std::fs::read(labels_path)?)?;
    let k = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    let d = inputs.cols();
    let train = Batch::new(inputs, labels, k)?;
    Ok(DatasetHandle {
        name: images_path
            .file_stem()
            .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned()),
        test: Batch::new(Matrix::zeros(0, d), Vec::new(), k)?,
        train,
        d,
        k,
        provenance: Provenance::IdxFiles,
    })
}

/// Train and test IDX pairs combined into one handle.
pub fn load_idx_split(train: (&Path, &Path), test: (&Path, &Path)) -> Result<DatasetHandle> {
    let mut a = load_idx(train.0, train.1)?;
    let b = load_idx(test.0, test.1)?;
    if a.d != b.d {
        return Err(Error::Shape(format!("train images have {} pixels, test {}", a.d, b.d)));
    }
    let k = a.k.max(b.k);
    a.train = Batch::new(a.train.inputs, a.train.labels, k)?;
    a.test = Batch::new(b.train.inputs, b.train.labels, k)?;
    a.k = k;
    Ok(a)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    Brightness,
    Blur,
}

/// Noise level used by [`CorruptionKind::GaussianNoise`].
pub fn noise_sigma(severity: u8) -> f64 {
    0.04 * f64::from(severity)
}

pub fn add_gaussian_noise(batch: &Batch, sigma: f64, rng: &mut RngStream) -> Batch {
    let mut x = batch.inputs.clone();
    for v in x.as_mut_slice() {
        *v = (*v + sigma * rng.normal()).clamp(0.0, 1.0);
    }
    batch.with_inputs(x)
}

fn brighten(batch: &Batch, amount: f64) -> Batch {
    let mut x = batch.inputs.clone();
    x.as_mut_slice().iter_mut().for_each(|v| *v = (*v + amount).clamp(0.0, 1.0));
    batch.with_inputs(x)
}

/// Box blur: a `(2r+1)^2` kernel when the features form a square image,
/// otherwise a window of `severity` neighbours on each side in index order.
/// Only in-range neighbours are averaged.
fn blur(batch: &Batch, severity: u8) -> Batch {
    let d = batch.inputs.cols();
    let side = (d as f64).sqrt().round() as usize;
    let mut out = batch.inputs.clone();
    for i in 0..out.rows() {
        let src = batch.inputs.row(i);
        let dst = out.row_mut(i);
        if side * side == d && side > 1 {
            let r = usize::from(severity).div_ceil(2);
            for y in 0..side {
                for x in 0..side {
                    let (mut s, mut n) = (0.0, 0.0);
                    for yy in y.saturating_sub(r)..=(y + r).min(side - 1) {
                        for xx in x.saturating_sub(r)..=(x + r).min(side - 1) {
                            s += src[yy * side + xx];
                            n += 1.0;
                        }
                    }
                    dst[y * side + x] = s / n;
                }
            }
        } else {
            let r = usize::from(severity);
            for j in 0..d {
                let lo = j.saturating_sub(r);
                let hi = (j + r).min(d - 1);
                let window = &src[lo..=hi];
                dst[j] = window.iter().sum::<f64>() / window.len() as f64;
            }
        }
    }
    batch.with_inputs(out)
}

/// Corrupts the test split; the training split is left untouched.
pub fn corrupt(data: &DatasetHandle, kind: CorruptionKind, severity: u8, seed: u64) -> Result<DatasetHandle> {
    if !(1..=5).contains(&severity) {
        return Err(Error::Config(format!("corruption severity {severity} outside 1..=5")));
    }
    let test = match kind {
        CorruptionKind::GaussianNoise => {
            add_gaussian_noise(&data.test, noise_sigma(severity), &mut RngStream::new(seed, 0))
        }
        CorruptionKind::Brightness => brighten(&data.test, 0.08 * f64::from(severity)),
        CorruptionKind::Blur => blur(&data.test, severity),
    };
    Ok(DatasetHandle {
        name: format!("{}-{kind:?}-{severity}", data.name),
        test,
        ..data.clone()
    })
}
