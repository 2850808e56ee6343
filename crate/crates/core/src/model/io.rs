//! On-disk model format.
//!
//! A model is a directory holding two files:
//!
//! * `manifest.json`: format tag and version, model name, input shape, the
//!   ordered layer list with hyperparameters, and for each weight buffer its
//!   shape, byte offset, element count and SHA-256. The whole weight file's
//!   size and SHA-256 are recorded too.
//! * `weights.bin`: every buffer back to back as little-endian `f32`.
//!
//! Weights are held as `f64` in memory, so saving rounds them to `f32`. A
//! loaded model re-saves to byte-identical files.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ActShape, BatchNorm, Conv, FactorizedConv, FactorizedFc, Fc, Layer, ModelGraph};
use crate::tensor::{Matrix, Tensor};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT_TAG: &str = "lowrank-model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the weight file.
    pub offset: u64,
    /// Number of `f32` values.
    pub len: u64,
    pub sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsEntry {
    file: String,
    bytes: u64,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    epsilon: Option<f64>,
    #[serde(default)]
    blobs: Vec<BlobEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    format_version: u32,
    name: String,
    revision: u32,
    input_shape: ActShape,
    layers: Vec<LayerEntry>,
    weights: WeightsEntry,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Appends named buffers to `bytes` as `f32` and returns their entries.
pub(crate) fn write_blobs(bytes: &mut Vec<u8>, blobs: &[(&str, Vec<usize>, &[f64])]) -> Vec<BlobEntry> {
    blobs
        .iter()
        .map(|(name, shape, values)| {
            let offset = bytes.len();
            for v in values.iter() {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            BlobEntry {
                name: name.to_string(),
                shape: shape.clone(),
                offset: offset as u64,
                len: values.len() as u64,
                sha256: sha256_hex(&bytes[offset..]),
            }
        })
        .collect()
}

/// Reads and verifies one buffer described by `entry`.
pub(crate) fn read_blobs(bytes: &[u8], entry: &BlobEntry) -> Result<Vec<f64>> {
    let expected: u64 = entry.shape.iter().map(|&d| d as u64).product();
    if expected != entry.len {
        return Err(Error::MalformedManifest(format!(
            "blob {} has shape {:?} but length {}",
            entry.name, entry.shape, entry.len
        )));
    }
    let start = entry.offset as usize;
    let end = start + 4 * entry.len as usize;
    let region = bytes.get(start..end).ok_or_else(|| Error::ChecksumMismatch {
        blob: entry.name.clone(),
        expected: entry.sha256.clone(),
        found: "<out of range>".into(),
    })?;
    let found = sha256_hex(region);
    if found != entry.sha256 {
        return Err(Error::ChecksumMismatch {
            blob: entry.name.clone(),
            expected: entry.sha256.clone(),
            found,
        });
    }
    Ok(region
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn matrix_blob<'a>(name: &'a str, m: &'a Matrix) -> (&'a str, Vec<usize>, &'a [f64]) {
    (name, vec![m.rows(), m.cols()], m.data())
}

fn tensor_blob<'a>(name: &'a str, t: &'a Tensor) -> (&'a str, Vec<usize>, &'a [f64]) {
    (name, t.shape().to_vec(), t.data())
}

fn vec_blob<'a>(name: &'a str, v: &'a [f64]) -> (&'a str, Vec<usize>, &'a [f64]) {
    (name, vec![v.len()], v)
}

fn entry(kind: &str) -> LayerEntry {
    LayerEntry {
        kind: kind.to_string(),
        stride: None,
        padding: None,
        size: None,
        epsilon: None,
        blobs: Vec::new(),
    }
}

/// Writes `model` into the directory `dir`, creating it if needed.
pub fn save(model: &ModelGraph, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut layers = Vec::with_capacity(model.layers().len());
    for layer in model.layers() {
        let mut e = entry(layer.kind());
        match layer {
            Layer::Conv(c) => {
                e.stride = Some(c.stride);
                e.padding = Some(c.padding);
                e.blobs = write_blobs(
                    &mut bytes,
                    &[tensor_blob("kernel", &c.kernel), vec_blob("bias", &c.bias)],
                );
            }
            Layer::FactorizedConv(f) => {
                e.stride = Some(f.stride);
                e.padding = Some(f.padding);
                e.blobs = write_blobs(
                    &mut bytes,
                    &[
                        tensor_blob("first", &f.first),
                        tensor_blob("middle", &f.middle),
                        tensor_blob("last", &f.last),
                        vec_blob("bias", &f.bias),
                    ],
                );
            }
            Layer::Fc(f) => {
                e.blobs = write_blobs(
                    &mut bytes,
                    &[matrix_blob("weight", &f.weight), vec_blob("bias", &f.bias)],
                );
            }
            Layer::FactorizedFc(f) => {
                e.blobs = write_blobs(
                    &mut bytes,
                    &[
                        matrix_blob("first", &f.first),
                        matrix_blob("last", &f.last),
                        vec_blob("bias", &f.bias),
                    ],
                );
            }
            Layer::BatchNorm(bn) => {
                e.epsilon = Some(bn.epsilon);
                e.blobs = write_blobs(
                    &mut bytes,
                    &[
                        vec_blob("mean", &bn.mean),
                        vec_blob("variance", &bn.variance),
                        vec_blob("gamma", &bn.gamma),
                        vec_blob("beta", &bn.beta),
                    ],
                );
            }
            Layer::MaxPool { size, stride } => {
                e.size = Some(*size);
                e.stride = Some(*stride);
            }
            Layer::Relu | Layer::Softmax => {}
        }
        layers.push(e);
    }
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        format_version: FORMAT_VERSION,
        name: model.name.clone(),
        revision: model.revision,
        input_shape: model.input_shape,
        layers,
        weights: WeightsEntry {
            file: WEIGHTS_FILE.into(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        },
    };
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::MalformedManifest(e.to_string()))?;
    let weights_path = dir.join(WEIGHTS_FILE);
    fs::write(&weights_path, &bytes).map_err(|e| Error::io(&weights_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

struct BlobReader<'a> {
    bytes: &'a [u8],
    entry: &'a LayerEntry,
    index: usize,
}

impl BlobReader<'_> {
    fn blob(&self, name: &str) -> Result<(&BlobEntry, Vec<f64>)> {
        let b = self
            .entry
            .blobs
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| {
                Error::MalformedManifest(format!(
                    "layer {} ({}) is missing blob {name}",
                    self.index, self.entry.kind
                ))
            })?;
        Ok((b, read_blobs(self.bytes, b)?))
    }

    fn vector(&self, name: &str) -> Result<Vec<f64>> {
        Ok(self.blob(name)?.1)
    }

    fn tensor(&self, name: &str) -> Result<Tensor> {
        let (b, data) = self.blob(name)?;
        Tensor::new(b.shape.clone(), data).map_err(|e| self.malformed(e))
    }

    fn matrix(&self, name: &str) -> Result<Matrix> {
        Matrix::try_from(self.tensor(name)?).map_err(|e| self.malformed(e))
    }

    fn field(&self, value: Option<usize>, name: &str) -> Result<usize> {
        value.ok_or_else(|| {
            Error::MalformedManifest(format!(
                "layer {} ({}) is missing {name}",
                self.index, self.entry.kind
            ))
        })
    }

    fn malformed(&self, e: Error) -> Error {
        Error::MalformedManifest(format!("layer {} ({}): {e}", self.index, self.entry.kind))
    }
}

/// Reads a model directory written by [`save`].
pub fn load(dir: impl AsRef<Path>) -> Result<ModelGraph> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::MalformedManifest(e.to_string()))?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::MalformedManifest(format!(
            "unknown format tag {:?}",
            manifest.format
        )));
    }
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::MalformedManifest(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let weights_path = dir.join(&manifest.weights.file);
    let bytes = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    let found = sha256_hex(&bytes);
    if bytes.len() as u64 != manifest.weights.bytes || found != manifest.weights.sha256 {
        return Err(Error::ChecksumMismatch {
            blob: manifest.weights.file.clone(),
            expected: manifest.weights.sha256.clone(),
            found,
        });
    }

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (index, entry) in manifest.layers.iter().enumerate() {
        let r = BlobReader {
            bytes: &bytes,
            entry,
            index,
        };
        let layer = match entry.kind.as_str() {
            "conv" => Layer::Conv(
                Conv::new(
                    r.tensor("kernel")?,
                    r.vector("bias")?,
                    r.field(entry.stride, "stride")?,
                    r.field(entry.padding, "padding")?,
                )
                .map_err(|e| r.malformed(e))?,
            ),
            "factorized_conv" => Layer::FactorizedConv(FactorizedConv {
                first: r.tensor("first")?,
                middle: r.tensor("middle")?,
                last: r.tensor("last")?,
                bias: r.vector("bias")?,
                stride: r.field(entry.stride, "stride")?,
                padding: r.field(entry.padding, "padding")?,
            }),
            "fc" => Layer::Fc(
                Fc::new(r.matrix("weight")?, r.vector("bias")?).map_err(|e| r.malformed(e))?,
            ),
            "factorized_fc" => Layer::FactorizedFc(FactorizedFc {
                first: r.matrix("first")?,
                last: r.matrix("last")?,
                bias: r.vector("bias")?,
            }),
            "batch_norm" => Layer::BatchNorm(BatchNorm {
                mean: r.vector("mean")?,
                variance: r.vector("variance")?,
                gamma: r.vector("gamma")?,
                beta: r.vector("beta")?,
                epsilon: entry.epsilon.ok_or_else(|| {
                    Error::MalformedManifest(format!("layer {index} (batch_norm) is missing epsilon"))
                })?,
            }),
            "relu" => Layer::Relu,
            "max_pool" => Layer::MaxPool {
                size: r.field(entry.size, "size")?,
                stride: r.field(entry.stride, "stride")?,
            },
            "softmax" => Layer::Softmax,
            other => {
                return Err(Error::MalformedManifest(format!(
                    "unknown layer tag {other:?} at layer {index}"
                )))
            }
        };
        layers.push(layer);
    }
    let mut model = ModelGraph::new(manifest.name, manifest.input_shape, layers)
        .map_err(|e| Error::MalformedManifest(e.to_string()))?;
    model.revision = manifest.revision;
    Ok(model)
}
