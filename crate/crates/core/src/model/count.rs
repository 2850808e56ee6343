use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{kernel_dims, Layer, ModelGraph};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCount {
    pub index: usize,
    pub kind: String,
    pub params: u64,
    /// Multiply-accumulates for one sample.
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountReport {
    pub layers: Vec<LayerCount>,
    pub total_params: u64,
    pub total_macs: u64,
}

/// Parameter and MAC counts per layer for the model's input shape.
///
/// Conv MACs are kernel weights times output positions; the first 1×1 of a
/// factorized stack runs at input resolution. Batch norm counts its four
/// per-channel vectors and one MAC per element.
pub fn count(model: &ModelGraph) -> Result<CountReport> {
    let shapes = model.shapes()?;
    let mut layers = Vec::with_capacity(model.layers().len());
    for (index, layer) in model.layers().iter().enumerate() {
        let (input, output) = (shapes[index], shapes[index + 1]);
        let out_positions = (output.height * output.width) as u64;
        let in_positions = (input.height * input.width) as u64;
        let (params, macs) = match layer {
            Layer::Conv(c) => {
                let (kh, kw, s, t) = kernel_dims(&c.kernel);
                let weights = (kh * kw * s * t) as u64;
                (weights + t as u64, weights * out_positions)
            }
            Layer::FactorizedConv(f) => {
                let (kh, kw, r3, r4) = kernel_dims(&f.middle);
                let (s, t) = (f.in_channels() as u64, f.out_channels() as u64);
                let (r3, r4) = (r3 as u64, r4 as u64);
                let core = (kh * kw) as u64 * r3 * r4;
                (
                    s * r3 + core + r4 * t + t,
                    s * r3 * in_positions + (core + r4 * t) * out_positions,
                )
            }
            Layer::Fc(f) => {
                let w = (f.weight.rows() * f.weight.cols()) as u64;
                (w + f.weight.rows() as u64, w)
            }
            Layer::FactorizedFc(f) => {
                let w = (f.first.rows() * f.first.cols() + f.last.rows() * f.last.cols()) as u64;
                (w + f.last.rows() as u64, w)
            }
            Layer::BatchNorm(bn) => (4 * bn.channels() as u64, output.len() as u64),
            Layer::Relu | Layer::MaxPool { .. } | Layer::Softmax => (0, 0),
        };
        layers.push(LayerCount {
            index,
            kind: layer.kind().to_string(),
            params,
            macs,
        });
    }
    Ok(CountReport {
        total_params: layers.iter().map(|l| l.params).sum(),
        total_macs: layers.iter().map(|l| l.macs).sum(),
        layers,
    })
}
