//! Labelled image datasets: CIFAR-10 binary batches, IDX files, and a seeded
//! synthetic Gaussian-blob task.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::init::{gaussian, rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Per-channel normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Dataset<T> {
    images: Tensor<T>,
    labels: Vec<usize>,
    classes: usize,
    pub split: Split,
    pub norm: Option<NormStats>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape("dataset", format!("images {:?}, expected [N, C, H, W]", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} images, {} labels", images.shape()[0], labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label: bad, classes });
        }
        Ok(Dataset {
            images,
            labels,
            classes,
            split,
            norm: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Gathers the given samples into a batch.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let per: usize = self.sample_shape().iter().product();
        let mut data = Vec::with_capacity(per * idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::shape("batch", format!("index {i} of {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(self.sample_shape());
        Ok((Tensor::new(shape, data)?, labels))
    }

    /// Shuffled minibatch indices for one epoch; deterministic in `(seed, epoch)`.
    pub fn epoch_batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut r = rng(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        idx.shuffle(&mut r);
        idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }

    /// In-order minibatch indices.
    pub fn sequential_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx)?;
        Ok(Dataset {
            images,
            labels,
            classes: self.classes,
            split: self.split,
            norm: self.norm.clone(),
        })
    }

    pub fn channel_stats(&self) -> NormStats {
        let c = self.sample_shape()[0];
        let per: usize = self.sample_shape()[1..].iter().product();
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (k, chunk) in self.images.data().chunks(per).enumerate() {
            let ch = k % c;
            for &v in chunk {
                let v = v.as_f64();
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
        let count = (self.len() * per) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0).sqrt().max(1e-8))
            .collect();
        NormStats { mean, std }
    }

    /// Mean-std normalizes with this dataset's own statistics and records them.
    pub fn normalize(&mut self) -> NormStats {
        let stats = self.channel_stats();
        self.apply_norm(&stats);
        stats
    }

    /// Normalizes with externally supplied statistics (e.g. the training split's).
    pub fn normalize_with(&mut self, stats: &NormStats) -> Result<()> {
        if stats.mean.len() != self.sample_shape()[0] || stats.std.len() != stats.mean.len() {
            return Err(Error::shape("normalize", "statistics do not match channel count"));
        }
        self.apply_norm(stats);
        Ok(())
    }

    fn apply_norm(&mut self, stats: &NormStats) {
        let c = self.sample_shape()[0];
        let per: usize = self.sample_shape()[1..].iter().product();
        for (k, chunk) in self.images.data_mut().chunks_mut(per).enumerate() {
            let ch = k % c;
            let (m, s) = (T::of(stats.mean[ch]), T::of(stats.std[ch]));
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        self.norm = Some(stats.clone());
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            classes: self.classes,
            split: self.split,
            norm: self.norm.clone(),
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses concatenated CIFAR-10 binary records: one label byte followed by
/// 1024 R, 1024 G and 1024 B bytes, each plane row-major. Pixels scale to [0, 1].
pub fn parse_cifar10<T: Scalar>(bytes: &[u8], split: Split) -> Result<Dataset<T>> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::format(
            "CIFAR-10 batch",
            format!("{} bytes is not a whole number of {CIFAR_RECORD}-byte records", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    let inv = T::of(1.0 / 255.0);
    for rec in bytes.chunks(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| T::of(b as f64) * inv));
    }
    Dataset::new(Tensor::new(vec![n, 3, 32, 32], data)?, labels, 10, split)
}

/// Loads and concatenates CIFAR-10 batch files. When `expected` is given the
/// total record count must match it.
pub fn load_cifar10<T: Scalar>(paths: &[&Path], split: Split, expected: Option<usize>) -> Result<Dataset<T>> {
    let mut bytes = Vec::new();
    for p in paths {
        let b = read(p)?;
        if b.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                "CIFAR-10 batch",
                format!("{}: truncated ({} bytes)", p.display(), b.len()),
            ));
        }
        bytes.extend_from_slice(&b);
    }
    let ds = parse_cifar10(&bytes, split)?;
    if let Some(n) = expected {
        if ds.len() != n {
            return Err(Error::format(
                "CIFAR-10 batch",
                format!("expected {n} records, found {}", ds.len()),
            ));
        }
    }
    Ok(ds)
}

/// Loads the standard CIFAR-10 binary layout (`data_batch_{1..5}.bin`,
/// `test_batch.bin`) from `dir`.
pub fn load_cifar10_dir<T: Scalar>(dir: &Path, split: Split) -> Result<Dataset<T>> {
    let names: Vec<String> = match split {
        Split::Train => (1..=5).map(|k| format!("data_batch_{k}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let paths: Vec<_> = names.iter().map(|n| dir.join(n)).collect();
    let refs: Vec<&Path> = paths.iter().map(|p| p.as_path()).collect();
    let expected = match split {
        Split::Train => 50_000,
        Split::Test => 10_000,
    };
    load_cifar10(&refs, split, Some(expected))
}

/// Decoded IDX array of unsigned bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

/// Parses an IDX file: two zero bytes, a type byte (0x08, unsigned byte), a
/// rank byte, then big-endian u32 extents and the payload.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::format("IDX file", "bad magic number"));
    }
    if bytes[2] != 0x08 {
        return Err(Error::format(
            "IDX file",
            format!("unsupported element type 0x{:02x}", bytes[2]),
        ));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if rank == 0 || bytes.len() < header {
        return Err(Error::format("IDX file", "truncated header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if bytes.len() - header != n {
        return Err(Error::format(
            "IDX file",
            format!("header declares {n} elements, payload has {}", bytes.len() - header),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

/// Loads an IDX image file (`[N, H, W]` or `[N, C, H, W]`) with its label file.
pub fn load_idx<T: Scalar>(images: &Path, labels: &Path, split: Split) -> Result<Dataset<T>> {
    let img = parse_idx(&read(images)?)?;
    let lab = parse_idx(&read(labels)?)?;
    idx_dataset(img, lab, split)
}

pub fn idx_dataset<T: Scalar>(img: IdxArray, lab: IdxArray, split: Split) -> Result<Dataset<T>> {
    let shape = match img.dims.as_slice() {
        [n, h, w] => vec![*n, 1, *h, *w],
        [n, c, h, w] => vec![*n, *c, *h, *w],
        d => return Err(Error::format("IDX images", format!("rank {} not supported", d.len()))),
    };
    if lab.dims.len() != 1 || lab.dims[0] != shape[0] {
        return Err(Error::format(
            "IDX labels",
            format!("{:?} labels for {} images", lab.dims, shape[0]),
        ));
    }
    let labels: Vec<usize> = lab.data.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    let inv = T::of(1.0 / 255.0);
    let data = img.data.iter().map(|&b| T::of(b as f64) * inv).collect();
    Dataset::new(Tensor::new(shape, data)?, labels, classes, split)
}

/// Parameters of the synthetic blob task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub shape: [usize; 3],
    /// Blobs per class template.
    pub blobs: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Maximum blob-centre displacement in pixels.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            train: 2000,
            test: 1000,
            shape: [3, 8, 8],
            blobs: 2,
            noise: 0.6,
            jitter: 1.0,
            seed: 7,
        }
    }
}

struct Blob {
    cy: f64,
    cx: f64,
    sigma: f64,
    amp: Vec<f64>,
}

/// Seeded K-class Gaussian-blob images. Class templates depend only on
/// `cfg.seed`; the samples drawn depend on the split as well.
pub fn synth<T: Scalar>(cfg: &SynthConfig, split: Split) -> Result<Dataset<T>> {
    let n = match split {
        Split::Train => cfg.train,
        Split::Test => cfg.test,
    };
    if n == 0 || cfg.classes == 0 || cfg.blobs == 0 || cfg.shape.contains(&0) {
        return Err(Error::EmptyDataset);
    }
    let [c, h, w] = cfg.shape;
    let mut tr = rng(cfg.seed);
    let templates: Vec<Vec<Blob>> = (0..cfg.classes)
        .map(|_| {
            (0..cfg.blobs)
                .map(|_| Blob {
                    cy: tr.gen_range(0.0..h as f64),
                    cx: tr.gen_range(0.0..w as f64),
                    sigma: tr.gen_range(0.8..2.0),
                    amp: (0..c).map(|_| tr.gen_range(-1.0..1.0)).collect(),
                })
                .collect()
        })
        .collect();
    let stream = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut sr = rng(cfg.seed.wrapping_mul(31).wrapping_add(stream));
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let label = k % cfg.classes;
        labels.push(label);
        let shifted: Vec<(f64, f64, f64, f64)> = templates[label]
            .iter()
            .map(|b| {
                (
                    b.cy + sr.gen_range(-cfg.jitter..=cfg.jitter),
                    b.cx + sr.gen_range(-cfg.jitter..=cfg.jitter),
                    b.sigma,
                    sr.gen_range(0.7..1.3),
                )
            })
            .collect();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.0;
                    for (b, &(cy, cx, s, gain)) in templates[label].iter().zip(&shifted) {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        v += gain * b.amp[ch] * (-d2 / (2.0 * s * s)).exp();
                    }
                    v += cfg.noise * gaussian(&mut sr);
                    data.push(T::of(v));
                }
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, cfg.classes, split)
}
