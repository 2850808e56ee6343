//! Synthetic shape-classification images.
//!
//! Each class is a stroke pattern (bars, diagonals, crosses, boxes, rings,
//! corners) drawn at a random offset, size and intensity on a small
//! single-channel canvas, then buried in Gaussian pixel noise. Classes are
//! exactly balanced in both splits.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{read_blobs, write_blobs, ActShape, BlobEntry};
use crate::runtime::Batch;
use crate::tensor::Tensor;

pub type Split = Batch;

pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Square canvas side.
    pub size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            size: 12,
            train_per_class: 500,
            test_per_class: 200,
            noise: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub test: Split,
    pub num_classes: usize,
    pub seed: u64,
    pub config: DatasetConfig,
}

impl Dataset {
    pub fn input_shape(&self) -> ActShape {
        self.train.sample_shape()
    }

    /// Writes the dataset as a manifest plus `f32` blob, like model files.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let labels = |s: &Split| s.labels.iter().map(|&l| l as f64).collect::<Vec<_>>();
        let (train_labels, test_labels) = (labels(&self.train), labels(&self.test));
        let mut bytes = Vec::new();
        let blobs = write_blobs(
            &mut bytes,
            &[
                ("train_inputs", self.train.inputs.shape().to_vec(), self.train.inputs.data()),
                ("train_labels", vec![train_labels.len()], &train_labels),
                ("test_inputs", self.test.inputs.shape().to_vec(), self.test.inputs.data()),
                ("test_labels", vec![test_labels.len()], &test_labels),
            ],
        );
        let manifest = DatasetManifest {
            format: "lowrank-dataset".into(),
            format_version: 1,
            seed: self.seed,
            num_classes: self.num_classes,
            config: self.config.clone(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            blobs,
        };
        let data_path = dir.join("dataset.bin");
        fs::write(&data_path, &bytes).map_err(|e| Error::io(&data_path, e))?;
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::MalformedManifest(e.to_string()))?;
        let path = dir.join("dataset.json");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let path = dir.join("dataset.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::MalformedManifest(e.to_string()))?;
        if m.format != "lowrank-dataset" || m.format_version != 1 {
            return Err(Error::MalformedManifest(format!(
                "unsupported dataset format {} v{}",
                m.format, m.format_version
            )));
        }
        let data_path = dir.join("dataset.bin");
        let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
        let blob = |name: &str| -> Result<(Vec<usize>, Vec<f64>)> {
            let b = m
                .blobs
                .iter()
                .find(|b| b.name == name)
                .ok_or_else(|| Error::MalformedManifest(format!("missing blob {name}")))?;
            Ok((b.shape.clone(), read_blobs(&bytes, b)?))
        };
        let split = |prefix: &str| -> Result<Split> {
            let (shape, data) = blob(&format!("{prefix}_inputs"))?;
            let (_, labels) = blob(&format!("{prefix}_labels"))?;
            let inputs = Tensor::new(shape, data).map_err(|e| Error::MalformedManifest(e.to_string()))?;
            Batch::new(inputs, labels.into_iter().map(|l| l as usize).collect())
                .map_err(|e| Error::MalformedManifest(e.to_string()))
        };
        Ok(Dataset {
            train: split("train")?,
            test: split("test")?,
            num_classes: m.num_classes,
            seed: m.seed,
            config: m.config,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    format_version: u32,
    seed: u64,
    num_classes: usize,
    config: DatasetConfig,
    sha256: String,
    blobs: Vec<BlobEntry>,
}

struct Canvas {
    size: usize,
    pixels: Vec<f64>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Canvas {
            size,
            pixels: vec![0.0; size * size],
        }
    }

    fn dot(&mut self, y: i64, x: i64, v: f64) {
        let n = self.size as i64;
        if (0..n).contains(&y) && (0..n).contains(&x) {
            let p = &mut self.pixels[(y * n + x) as usize];
            *p = p.max(v);
        }
    }

    fn line(&mut self, (y0, x0): (i64, i64), (y1, x1): (i64, i64), v: f64) {
        let steps = (y1 - y0).abs().max((x1 - x0).abs()).max(1);
        for s in 0..=steps {
            let y = y0 + (y1 - y0) * s / steps;
            let x = x0 + (x1 - x0) * s / steps;
            self.dot(y, x, v);
        }
    }
}

fn draw(class: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut c = Canvas::new(size);
    let mid = size as i64 / 2;
    let cy = mid + rng.random_range(-2..=2);
    let cx = mid + rng.random_range(-2..=2);
    let r: i64 = rng.random_range(2..=4);
    let v = rng.random_range(0.7..1.0);
    match class {
        0 => c.line((cy, cx - r), (cy, cx + r), v),
        1 => c.line((cy - r, cx), (cy + r, cx), v),
        2 => c.line((cy - r, cx - r), (cy + r, cx + r), v),
        3 => c.line((cy - r, cx + r), (cy + r, cx - r), v),
        4 => {
            c.line((cy, cx - r), (cy, cx + r), v);
            c.line((cy - r, cx), (cy + r, cx), v);
        }
        5 => {
            c.line((cy - r, cx - r), (cy + r, cx + r), v);
            c.line((cy - r, cx + r), (cy + r, cx - r), v);
        }
        6 => {
            c.line((cy - r, cx - r), (cy - r, cx + r), v);
            c.line((cy + r, cx - r), (cy + r, cx + r), v);
            c.line((cy - r, cx - r), (cy + r, cx - r), v);
            c.line((cy - r, cx + r), (cy + r, cx + r), v);
        }
        7 => {
            let h = (r - 1).max(1);
            for y in cy - h..=cy + h {
                c.line((y, cx - h), (y, cx + h), v);
            }
        }
        8 => {
            let rf = r as f64 + 0.5;
            for k in 0..48 {
                let a = k as f64 * std::f64::consts::TAU / 48.0;
                c.dot(
                    cy + (rf * a.sin()).round() as i64,
                    cx + (rf * a.cos()).round() as i64,
                    v,
                );
            }
        }
        9 => {
            c.line((cy - r, cx - r), (cy + r, cx - r), v);
            c.line((cy + r, cx - r), (cy + r, cx + r), v);
        }
        _ => unreachable!("unknown class {class}"),
    }
    c.pixels
}

fn make_split(per_class: usize, cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Result<Split> {
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut samples: Vec<(usize, Vec<f64>)> = Vec::with_capacity(per_class * NUM_CLASSES);
    for class in 0..NUM_CLASSES {
        for _ in 0..per_class {
            let mut img = draw(class, cfg.size, rng);
            img.iter_mut().for_each(|p| *p += noise.sample(rng));
            samples.push((class, img));
        }
    }
    samples.shuffle(rng);
    let n = samples.len();
    let mut data = Vec::with_capacity(n * cfg.size * cfg.size);
    let mut labels = Vec::with_capacity(n);
    for (label, img) in samples {
        labels.push(label);
        data.extend(img);
    }
    Batch::new(Tensor::new(vec![n, 1, cfg.size, cfg.size], data)?, labels)
}

/// Deterministic dataset for `seed` with the default configuration.
pub fn make_dataset(seed: u64) -> Result<Dataset> {
    make_dataset_with(seed, DatasetConfig::default())
}

pub fn make_dataset_with(seed: u64, config: DatasetConfig) -> Result<Dataset> {
    if config.size < 10 || config.train_per_class == 0 || config.test_per_class == 0 {
        return Err(Error::invalid("dataset needs a canvas of at least 10 and non-empty splits"));
    }
    // Separate streams so the test split does not depend on the train size.
    let mut train_rng = ChaCha8Rng::seed_from_u64(seed);
    train_rng.set_stream(1);
    let mut test_rng = ChaCha8Rng::seed_from_u64(seed);
    test_rng.set_stream(2);
    Ok(Dataset {
        train: make_split(config.train_per_class, &config, &mut train_rng)?,
        test: make_split(config.test_per_class, &config, &mut test_rng)?,
        num_classes: NUM_CLASSES,
        seed,
        config,
    })
}
