use std::path::Path;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::artifact::sha256_hex;
use crate::error::{Error, Result};
use crate::nn::{Batch, Partition, Tensor};
use crate::rng;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Train and test parts of one task. The test part is tagged so training
/// code rejects it.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Batch,
    pub test: Batch,
    pub classes: usize,
    /// Synthetic spec or file digests the data came from.
    pub provenance: String,
}

impl Dataset {
    pub fn new(train: Batch, test: Batch, provenance: String) -> Result<Self> {
        if train.classes() != test.classes() || train.dim() != test.dim() {
            return Err(Error::invalid("train and test parts disagree on shape or classes"));
        }
        Ok(Dataset {
            classes: train.classes(),
            train: train.tagged(Partition::Train),
            test: test.tagged(Partition::Test),
            provenance,
        })
    }

    /// Training sample count `m`.
    pub fn m(&self) -> usize {
        self.train.len()
    }

    pub fn dim(&self) -> usize {
        self.train.dim()
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::data(at as u64, format!("truncated {what}")))
}

/// Parses an IDX image file into an `(n × rows·cols)` tensor scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f64>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::data(0, format!("bad image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    let d = rows * cols;
    let need = 16 + n * d;
    if bytes.len() < need {
        return Err(Error::data(bytes.len() as u64, format!("truncated pixels: need {need} bytes")));
    }
    if n == 0 || d == 0 {
        return Err(Error::data(4, "empty image set"));
    }
    let data = bytes[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(vec![n, d], data)
}

/// Parses an IDX label file, checking every label against `classes`.
pub fn parse_idx_labels(bytes: &[u8], classes: usize) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::data(0, format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, "label count")? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::data(bytes.len() as u64, format!("truncated labels: need {} bytes", 8 + n)));
    }
    bytes[8..8 + n]
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if (y as usize) < classes {
                Ok(y as usize)
            } else {
                Err(Error::data(8 + i as u64, format!("label {y} outside [0, {classes})")))
            }
        })
        .collect()
}

/// Loads an image/label IDX pair, keeping the first `limit` samples if given.
/// Returns the batch and a provenance string with both file digests.
pub fn load_idx(images: &Path, labels: &Path, classes: usize, limit: Option<usize>) -> Result<(Batch, String)> {
    let ib = std::fs::read(images)?;
    let lb = std::fs::read(labels)?;
    let x = parse_idx_images(&ib)?;
    let y = parse_idx_labels(&lb, classes)?;
    let n = x.shape()[0];
    if y.len() != n {
        return Err(Error::data(4, format!("{} images but {} labels", n, y.len())));
    }
    let batch = Batch::new(x, y, classes)?;
    let batch = match limit {
        Some(k) if k < n => batch.select(&(0..k).collect::<Vec<_>>()),
        _ => batch,
    };
    let prov = format!("idx:{}:{}", sha256_hex(&ib), sha256_hex(&lb));
    Ok((batch, prov))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub dim: usize,
    /// Radius of the circle the class centres sit on.
    pub separation: f64,
    pub std: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            classes: 4,
            per_class: 100,
            test_per_class: 100,
            dim: 8,
            separation: 3.0,
            std: 1.0,
            seed: 0,
        }
    }
}

impl BlobSpec {
    /// Centre of class `c`: `separation·(cos 2πc/C, sin 2πc/C, 0, …)`.
    pub fn center(&self, c: usize) -> Vec<f64> {
        let a = 2.0 * std::f64::consts::PI * c as f64 / self.classes as f64;
        let mut m = vec![0.0; self.dim];
        m[0] = self.separation * a.cos();
        m[1] = self.separation * a.sin();
        m
    }

    fn sample(&self, per_class: usize, part: u64) -> Result<Batch> {
        let mut r = rng::stream(self.seed, &[rng::label::BLOBS, part]);
        let n = per_class * self.classes;
        let centers: Vec<Vec<f64>> = (0..self.classes).map(|c| self.center(c)).collect();
        let mut data = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % self.classes;
            for m in &centers[c] {
                let z: f64 = r.sample(StandardNormal);
                data.push(m + self.std * z);
            }
            labels.push(c);
        }
        Batch::new(Tensor::new(vec![n, self.dim], data)?, labels, self.classes)
    }
}

/// Class-balanced Gaussian blobs, labels interleaved `0, 1, …, C−1, 0, …`.
pub fn make_blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.per_class == 0 || spec.test_per_class == 0 || spec.dim < 2 {
        return Err(Error::Config("blobs need >= 2 classes, >= 2 dims and nonzero sample counts".into()));
    }
    if !(spec.std > 0.0) || !(spec.separation >= 0.0) {
        return Err(Error::Config("blobs need std > 0 and separation >= 0".into()));
    }
    let prov = format!(
        "blobs:c{}:n{}:t{}:d{}:sep{}:std{}:seed{}",
        spec.classes, spec.per_class, spec.test_per_class, spec.dim, spec.separation, spec.std, spec.seed
    );
    Dataset::new(spec.sample(spec.per_class, 0)?, spec.sample(spec.test_per_class, 1)?, prov)
}

/// Replaces exactly `⌊fraction·m⌋` training labels with a uniformly drawn
/// different class. Returns the new dataset and the sorted flipped indices.
pub fn inject_label_noise(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("label noise must be in [0, 1), got {fraction}")));
    }
    let m = data.m();
    let k = (fraction * m as f64).floor() as usize;
    if k == 0 {
        return Ok((data.clone(), Vec::new()));
    }
    if data.classes < 2 {
        return Err(Error::Config("label noise needs at least 2 classes".into()));
    }
    let mut r = rng::stream(seed, &[rng::label::LABEL_NOISE]);
    let mut flipped = index::sample(&mut r, m, k).into_vec();
    flipped.sort_unstable();
    let mut labels = data.train.labels().to_vec();
    for &i in &flipped {
        let shift = 1 + r.random_range(0..data.classes - 1);
        labels[i] = (labels[i] + shift) % data.classes;
    }
    let mut out = data.clone();
    out.train = data.train.with_labels(labels);
    out.provenance = format!("{}+noise{fraction}:seed{seed}", data.provenance);
    Ok((out, flipped))
}
