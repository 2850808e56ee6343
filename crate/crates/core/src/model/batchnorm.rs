use crate::error::{Error, Result};
use crate::model::{BatchNorm, Layer, ModelGraph};

/// Folds every batch-norm layer into the conv/FC layer right before it.
///
/// With `scale = gamma / sqrt(var + eps)`, output channel `c` of the
/// preceding layer gets its weights multiplied by `scale[c]` and its bias
/// replaced by `(bias - mean) * scale + beta`. A model without batch norm is
/// returned unchanged.
pub fn fold_batchnorm(model: &ModelGraph) -> Result<ModelGraph> {
    let mut layers: Vec<Layer> = Vec::with_capacity(model.layers().len());
    for (i, layer) in model.layers().iter().enumerate() {
        let Layer::BatchNorm(bn) = layer else {
            layers.push(layer.clone());
            continue;
        };
        let prev = layers.last_mut().ok_or_else(|| {
            Error::UnsupportedTopology(format!("batch norm at layer {i} has no preceding layer"))
        })?;
        let scale: Vec<f64> = bn
            .gamma
            .iter()
            .zip(&bn.variance)
            .map(|(g, v)| g / (v + bn.epsilon).sqrt())
            .collect();
        match prev {
            Layer::Conv(c) => {
                scale_last_axis(c.kernel.data_mut(), &scale);
                shift_bias(&mut c.bias, bn, &scale);
            }
            Layer::FactorizedConv(f) => {
                scale_last_axis(f.last.data_mut(), &scale);
                shift_bias(&mut f.bias, bn, &scale);
            }
            Layer::Fc(f) => {
                let cols = f.weight.cols();
                for (row, s) in f.weight.data_mut().chunks_mut(cols).zip(&scale) {
                    row.iter_mut().for_each(|x| *x *= s);
                }
                shift_bias(&mut f.bias, bn, &scale);
            }
            Layer::FactorizedFc(f) => {
                let cols = f.last.cols();
                for (row, s) in f.last.data_mut().chunks_mut(cols).zip(&scale) {
                    row.iter_mut().for_each(|x| *x *= s);
                }
                shift_bias(&mut f.bias, bn, &scale);
            }
            other => {
                return Err(Error::UnsupportedTopology(format!(
                    "batch norm at layer {i} follows a {} layer, not conv/fc",
                    other.kind()
                )))
            }
        }
    }
    let mut folded = ModelGraph::new(model.name.clone(), model.input_shape, layers)?;
    folded.revision = model.revision;
    Ok(folded)
}

/// Kernels are stored with the output channel as the fastest axis.
fn scale_last_axis(data: &mut [f64], scale: &[f64]) {
    for chunk in data.chunks_mut(scale.len()) {
        chunk.iter_mut().zip(scale).for_each(|(x, s)| *x *= s);
    }
}

fn shift_bias(bias: &mut [f64], bn: &BatchNorm, scale: &[f64]) {
    for (c, b) in bias.iter_mut().enumerate() {
        *b = (*b - bn.mean[c]) * scale[c] + bn.beta[c];
    }
}
