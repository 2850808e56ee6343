//! Minimal deterministic CPU engine: forward pass, cross-entropy backward,
//! momentum SGD, and a synthetic image dataset.
//!
//! Batches are `N × C × H × W`. Internally each sample is converted to
//! channels-last, which is also the layout of the layer-level helpers
//! [`layer_output`] and [`layer_gradients`].
//!
//! Work is spread across samples with rayon, but every reduction runs in
//! sample order, so results do not depend on the thread count.

mod dataset;
mod kernels;
mod train;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ActShape, Layer, ModelGraph};
use crate::tensor::Tensor;

pub use dataset::{make_dataset, make_dataset_with, Dataset, DatasetConfig, Split, NUM_CLASSES};
pub use train::{fine_tune, fine_tune_with_validation, train_epochs, TrainConfig, TrainOutcome};

use kernels::Cache;

/// A batch of images with integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    /// `N × C × H × W`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        if inputs.ndim() != 4 {
            return Err(Error::invalid(format!(
                "batch inputs must be N x C x H x W, got {:?}",
                inputs.shape()
            )));
        }
        if labels.len() != inputs.shape()[0] {
            return Err(Error::invalid("one label per sample is required"));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> ActShape {
        let s = self.inputs.shape();
        ActShape::new(s[1], s[2], s[3])
    }

    /// Sample `i` converted to channels-last.
    pub fn sample_hwc(&self, i: usize) -> Vec<f64> {
        let shape = self.sample_shape();
        let n = shape.len();
        chw_to_hwc(&self.inputs.data()[i * n..(i + 1) * n], shape)
    }
}

pub(crate) fn chw_to_hwc(x: &[f64], s: ActShape) -> Vec<f64> {
    let plane = s.height * s.width;
    let mut out = vec![0.0; x.len()];
    for c in 0..s.channels {
        for p in 0..plane {
            out[p * s.channels + c] = x[c * plane + p];
        }
    }
    out
}

fn check_input(model: &ModelGraph, shape: ActShape) -> Result<()> {
    if shape != model.input_shape {
        return Err(Error::invalid(format!(
            "input shape {shape:?} does not match model input {:?}",
            model.input_shape
        )));
    }
    Ok(())
}

/// Final-layer output of one channels-last sample, before any implicit softmax.
pub(crate) fn forward_sample(model: &ModelGraph, x: Vec<f64>) -> Vec<f64> {
    let mut act = x;
    let mut shape = model.input_shape;
    for layer in model.layers() {
        let (y, s, _) = kernels::forward(layer, &act, shape);
        act = y;
        shape = s;
    }
    act
}

fn to_probabilities(model: &ModelGraph, out: Vec<f64>) -> Vec<f64> {
    match model.layers().last() {
        Some(Layer::Softmax) => out,
        _ => kernels::softmax(&out),
    }
}

/// Class probabilities per sample. A linear head gets an implicit softmax.
pub fn forward(model: &ModelGraph, batch: &Batch) -> Result<Vec<Vec<f64>>> {
    check_input(model, batch.sample_shape())?;
    Ok((0..batch.len())
        .into_par_iter()
        .map(|i| to_probabilities(model, forward_sample(model, batch.sample_hwc(i))))
        .collect())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Top-1 predictions.
pub fn predict(model: &ModelGraph, batch: &Batch) -> Result<Vec<usize>> {
    check_input(model, batch.sample_shape())?;
    Ok((0..batch.len())
        .into_par_iter()
        .map(|i| argmax(&forward_sample(model, batch.sample_hwc(i))))
        .collect())
}

/// Fraction of samples whose top-1 prediction equals the label.
pub fn evaluate_accuracy(model: &ModelGraph, split: &Batch) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty split"));
    }
    let preds = predict(model, split)?;
    let correct = preds
        .iter()
        .zip(&split.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / split.len() as f64)
}

/// Median wall-clock seconds of `passes` forward sweeps over `split`.
pub fn time_forward(model: &ModelGraph, split: &Batch, passes: usize) -> Result<f64> {
    check_input(model, split.sample_shape())?;
    let inputs: Vec<Vec<f64>> = (0..split.len()).map(|i| split.sample_hwc(i)).collect();
    let mut times = Vec::with_capacity(passes.max(1));
    for _ in 0..passes.max(1) {
        let start = Instant::now();
        let sink: f64 = inputs
            .iter()
            .map(|x| forward_sample(model, x.clone())[0])
            .sum();
        std::hint::black_box(sink);
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok(times[times.len() / 2])
}

/// Output of a single layer for a channels-last input of shape `input`.
pub fn layer_output(layer: &Layer, input: ActShape, x: &[f64]) -> Result<Vec<f64>> {
    layer.output_shape(input)?;
    if x.len() != input.len() {
        return Err(Error::invalid("input buffer does not match its shape"));
    }
    Ok(kernels::forward(layer, x, input).0)
}

/// Gradients of `Σ upstream ⊙ output` for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub input: Vec<f64>,
    /// One buffer per entry of [`Layer::params`].
    pub params: Vec<Vec<f64>>,
}

/// Backward pass of one layer against an upstream gradient.
pub fn layer_gradients(
    layer: &Layer,
    input: ActShape,
    x: &[f64],
    upstream: &[f64],
) -> Result<LayerGradients> {
    let out = layer.output_shape(input)?;
    if x.len() != input.len() || upstream.len() != out.len() {
        return Err(Error::invalid("buffer lengths do not match layer shapes"));
    }
    let (_, _, cache) = kernels::forward(layer, x, input);
    let (dx, params) = kernels::backward(layer, &cache, x.len(), upstream);
    Ok(LayerGradients { input: dx, params })
}

/// Cross-entropy loss of one sample and its parameter gradients.
pub(crate) fn sample_gradients(
    model: &ModelGraph,
    x: Vec<f64>,
    label: usize,
) -> (f64, Vec<Vec<Vec<f64>>>) {
    let layers = model.layers();
    let mut caches: Vec<Cache> = Vec::with_capacity(layers.len());
    let mut lens = Vec::with_capacity(layers.len());
    let mut act = x;
    let mut shape = model.input_shape;
    for layer in layers {
        lens.push(act.len());
        let (y, s, cache) = kernels::forward(layer, &act, shape);
        caches.push(cache);
        act = y;
        shape = s;
    }
    // Softmax + cross-entropy fold into `p − onehot` on the logits.
    let ends_in_softmax = matches!(layers.last(), Some(Layer::Softmax));
    let probs = if ends_in_softmax {
        act
    } else {
        kernels::softmax(&act)
    };
    let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
    let mut grad = probs;
    grad[label] -= 1.0;
    let stop = if ends_in_softmax { layers.len() - 1 } else { layers.len() };

    let mut grads = vec![Vec::new(); layers.len()];
    for i in (0..stop).rev() {
        let (dx, g) = kernels::backward(&layers[i], &caches[i], lens[i], &grad);
        grads[i] = g;
        grad = dx;
    }
    (loss, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Conv, Fc};
    use crate::tensor::Matrix;

    #[test]
    fn zero_logits_give_uniform_probabilities() {
        let model = ModelGraph::new(
            "z",
            ActShape::new(1, 1, 3),
            vec![
                Layer::Fc(Fc::new(Matrix::zeros(4, 3), vec![0.0; 4]).unwrap()),
                Layer::Softmax,
            ],
        )
        .unwrap();
        let batch = Batch::new(Tensor::zeros(&[2, 1, 1, 3]).unwrap(), vec![0, 1]).unwrap();
        for p in forward(&model, &batch).unwrap() {
            assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn identity_pointwise_conv_copies_input() {
        let mut kernel = Tensor::zeros(&[1, 1, 3, 3]).unwrap();
        for c in 0..3 {
            kernel.set(&[0, 0, c, c], 1.0);
        }
        let layer = Layer::Conv(Conv::new(kernel, vec![0.0; 3], 1, 0).unwrap());
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let y = layer_output(&layer, ActShape::new(3, 2, 2), &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let model = ModelGraph::new(
            "z",
            ActShape::new(1, 1, 3),
            vec![Layer::Fc(Fc::new(Matrix::zeros(2, 3), vec![0.0; 2]).unwrap())],
        )
        .unwrap();
        let batch = Batch::new(Tensor::zeros(&[1, 1, 1, 4]).unwrap(), vec![0]).unwrap();
        assert!(forward(&model, &batch).is_err());
        let empty_ok = Batch::new(Tensor::zeros(&[1, 1, 1, 3]).unwrap(), vec![0]).unwrap();
        assert!(evaluate_accuracy(&model, &empty_ok).is_ok());
    }

    #[test]
    fn chw_to_hwc_interleaves() {
        let x = [1.0, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0];
        let y = chw_to_hwc(&x, ActShape::new(2, 2, 2));
        assert_eq!(y, vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0, 4.0, 40.0]);
    }
}
