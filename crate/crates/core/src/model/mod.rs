//! Network representation: an ordered list of layers over a fixed input shape.
//!
//! Conv kernels are 4-way tensors laid out `kh × kw × S × T` (two spatial
//! modes, then input channels `S`, then output channels `T`), so HOSVD modes 3
//! and 4 are the channel modes. FC weights are `out × in` matrices.
//!
//! Activations flowing between layers are channels-last (`H × W × C`) per
//! sample; FC layers see that buffer flattened in the same order.

mod batchnorm;
mod count;
mod io;
mod reference;
mod substitute;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor};

pub use batchnorm::fold_batchnorm;
pub use count::{count, CountReport, LayerCount};
pub use io::{load, save, FORMAT_VERSION, MANIFEST_FILE, WEIGHTS_FILE};
pub use reference::reference_cnn;
pub(crate) use io::{read_blobs, write_blobs, BlobEntry};
pub use substitute::{
    canonical_conv_core, canonical_fc_core, decompose_conv, decompose_fc, refactor_conv,
    refactor_fc, substitute_conv, substitute_fc,
};

/// Per-sample activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ActShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ActShape {
            channels,
            height,
            width,
        }
    }

    pub fn flat(n: usize) -> Self {
        ActShape::new(n, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    /// `kh × kw × S × T`.
    pub kernel: Tensor,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fc {
    /// `out × in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Tucker-2 realization of a conv: 1×1 (S→R₃), kh×kw (R₃→R₄), 1×1 (R₄→T).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedConv {
    /// `1 × 1 × S × R₃`.
    pub first: Tensor,
    /// `kh × kw × R₃ × R₄`, carries the original stride and padding.
    pub middle: Tensor,
    /// `1 × 1 × R₄ × T`.
    pub last: Tensor,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

/// Rank-p realization of an FC layer: `last · (first · x) + bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedFc {
    /// `p × in`.
    pub first: Matrix,
    /// `out × p`.
    pub last: Matrix,
    pub bias: Vec<f64>,
}

/// Inference-mode batch normalization over channels.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv),
    Fc(Fc),
    FactorizedConv(FactorizedConv),
    FactorizedFc(FactorizedFc),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool { size: usize, stride: usize },
    Softmax,
}

pub(crate) fn kernel_dims(kernel: &Tensor) -> (usize, usize, usize, usize) {
    match *kernel.shape() {
        [kh, kw, s, t] => (kh, kw, s, t),
        _ => panic!("conv kernel must be 4-way, got {:?}", kernel.shape()),
    }
}

pub(crate) fn conv_output(
    input: ActShape,
    (kh, kw): (usize, usize),
    stride: usize,
    padding: usize,
    out_channels: usize,
) -> Result<ActShape> {
    let (h, w) = (input.height + 2 * padding, input.width + 2 * padding);
    if stride == 0 || kh > h || kw > w {
        return Err(Error::invalid(format!(
            "{kh}x{kw} window with stride {stride} does not fit a padded {h}x{w} input"
        )));
    }
    Ok(ActShape::new(
        out_channels,
        (h - kh) / stride + 1,
        (w - kw) / stride + 1,
    ))
}

impl Conv {
    pub fn new(kernel: Tensor, bias: Vec<f64>, stride: usize, padding: usize) -> Result<Self> {
        let [_, _, _, t] = *kernel.shape() else {
            return Err(Error::invalid(format!(
                "conv kernel must be 4-way, got {:?}",
                kernel.shape()
            )));
        };
        if bias.len() != t {
            return Err(Error::invalid(format!("conv bias needs {t} entries, got {}", bias.len())));
        }
        if stride == 0 {
            return Err(Error::invalid("conv stride must be positive"));
        }
        Ok(Conv {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        kernel_dims(&self.kernel).2
    }

    pub fn out_channels(&self) -> usize {
        kernel_dims(&self.kernel).3
    }
}

impl Fc {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::invalid(format!(
                "FC bias needs {} entries, got {}",
                weight.rows(),
                bias.len()
            )));
        }
        Ok(Fc { weight, bias })
    }
}

impl FactorizedConv {
    /// `(R₃, R₄)`.
    pub fn ranks(&self) -> (usize, usize) {
        (kernel_dims(&self.first).3, kernel_dims(&self.last).2)
    }

    pub fn in_channels(&self) -> usize {
        kernel_dims(&self.first).2
    }

    pub fn out_channels(&self) -> usize {
        kernel_dims(&self.last).3
    }

    fn check(&self) -> Result<()> {
        let (fh, fw, s, r3) = kernel_dims(&self.first);
        let (_, _, m3, m4) = kernel_dims(&self.middle);
        let (lh, lw, r4, t) = kernel_dims(&self.last);
        if (fh, fw, lh, lw) != (1, 1, 1, 1) {
            return Err(Error::invalid("outer kernels of a factorized conv must be 1x1"));
        }
        if m3 != r3 || m4 != r4 {
            return Err(Error::invalid(format!(
                "middle kernel channels {m3}->{m4} do not match ranks {r3}->{r4}"
            )));
        }
        if r3 == 0 || r3 > s || r4 == 0 || r4 > t {
            return Err(Error::invalid(format!(
                "ranks ({r3}, {r4}) outside [1, {s}] x [1, {t}]"
            )));
        }
        if self.bias.len() != t {
            return Err(Error::invalid("factorized conv bias length must equal T"));
        }
        if self.stride == 0 {
            return Err(Error::invalid("conv stride must be positive"));
        }
        Ok(())
    }
}

impl FactorizedFc {
    pub fn rank(&self) -> usize {
        self.first.rows()
    }

    fn check(&self) -> Result<()> {
        let p = self.first.rows();
        if self.last.cols() != p {
            return Err(Error::invalid("factorized FC factors disagree on rank"));
        }
        if p > self.first.cols().min(self.last.rows()) {
            return Err(Error::invalid(format!(
                "rank {p} exceeds min(in, out) = {}",
                self.first.cols().min(self.last.rows())
            )));
        }
        if self.bias.len() != self.last.rows() {
            return Err(Error::invalid("factorized FC bias length must equal out"));
        }
        Ok(())
    }
}

impl BatchNorm {
    pub fn identity(channels: usize) -> Self {
        BatchNorm {
            mean: vec![0.0; channels],
            variance: vec![1.0; channels],
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            epsilon: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Fc(_) => "fc",
            Layer::FactorizedConv(_) => "factorized_conv",
            Layer::FactorizedFc(_) => "factorized_fc",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "max_pool",
            Layer::Softmax => "softmax",
        }
    }

    /// Conv, FC and their factorized forms.
    pub fn is_decomposable(&self) -> bool {
        matches!(
            self,
            Layer::Conv(_) | Layer::Fc(_) | Layer::FactorizedConv(_) | Layer::FactorizedFc(_)
        )
    }

    /// Output shape for a given input shape, checking compatibility.
    pub fn output_shape(&self, input: ActShape) -> Result<ActShape> {
        match self {
            Layer::Conv(c) => {
                let (kh, kw, s, t) = kernel_dims(&c.kernel);
                expect_channels(input, s, "conv")?;
                conv_output(input, (kh, kw), c.stride, c.padding, t)
            }
            Layer::FactorizedConv(f) => {
                f.check()?;
                let (kh, kw, _, _) = kernel_dims(&f.middle);
                expect_channels(input, f.in_channels(), "factorized conv")?;
                conv_output(input, (kh, kw), f.stride, f.padding, f.out_channels())
            }
            Layer::Fc(f) => {
                expect_len(input, f.weight.cols(), "fc")?;
                Ok(ActShape::flat(f.weight.rows()))
            }
            Layer::FactorizedFc(f) => {
                f.check()?;
                expect_len(input, f.first.cols(), "factorized fc")?;
                Ok(ActShape::flat(f.last.rows()))
            }
            Layer::BatchNorm(bn) => {
                expect_channels(input, bn.channels(), "batch norm")?;
                let c = bn.channels();
                if [bn.mean.len(), bn.variance.len(), bn.beta.len()] != [c, c, c] {
                    return Err(Error::invalid("batch norm statistics disagree in length"));
                }
                Ok(input)
            }
            Layer::Relu | Layer::Softmax => Ok(input),
            Layer::MaxPool { size, stride } => {
                if *size == 0 || *stride == 0 {
                    return Err(Error::invalid("max pool size and stride must be positive"));
                }
                conv_output(input, (*size, *size), *stride, 0, input.channels)
            }
        }
    }

    /// Trainable parameter buffers in a fixed order.
    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Layer::Conv(c) => vec![c.kernel.data(), &c.bias],
            Layer::Fc(f) => vec![f.weight.data(), &f.bias],
            Layer::FactorizedConv(f) => {
                vec![f.first.data(), f.middle.data(), f.last.data(), &f.bias]
            }
            Layer::FactorizedFc(f) => vec![f.first.data(), f.last.data(), &f.bias],
            Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
            Layer::Relu | Layer::MaxPool { .. } | Layer::Softmax => vec![],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Layer::Conv(c) => vec![c.kernel.data_mut(), &mut c.bias],
            Layer::Fc(f) => vec![f.weight.data_mut(), &mut f.bias],
            Layer::FactorizedConv(f) => vec![
                f.first.data_mut(),
                f.middle.data_mut(),
                f.last.data_mut(),
                &mut f.bias,
            ],
            Layer::FactorizedFc(f) => vec![f.first.data_mut(), f.last.data_mut(), &mut f.bias],
            Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
            Layer::Relu | Layer::MaxPool { .. } | Layer::Softmax => vec![],
        }
    }
}

fn expect_channels(input: ActShape, channels: usize, what: &str) -> Result<()> {
    if input.channels != channels {
        return Err(Error::invalid(format!(
            "{what} expects {channels} input channels, got {input:?}"
        )));
    }
    Ok(())
}

fn expect_len(input: ActShape, len: usize, what: &str) -> Result<()> {
    if input.len() != len {
        return Err(Error::invalid(format!(
            "{what} expects {len} inputs, got {input:?}"
        )));
    }
    Ok(())
}

/// An ordered, shape-checked network with a single output head at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub revision: u32,
    pub input_shape: ActShape,
    layers: Vec<Layer>,
}

impl ModelGraph {
    pub fn new(name: impl Into<String>, input_shape: ActShape, layers: Vec<Layer>) -> Result<Self> {
        let model = ModelGraph {
            name: name.into(),
            revision: 0,
            input_shape,
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to one layer. Shape-changing edits go through
    /// [`ModelGraph::replace_layer`] instead.
    pub fn layer_params_mut(&mut self, index: usize) -> Vec<&mut [f64]> {
        self.layers[index].params_mut()
    }

    pub(crate) fn layers_mut_unchecked(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Swaps one layer, re-validating the whole graph.
    pub fn replace_layer(&mut self, index: usize, layer: Layer) -> Result<()> {
        let old = std::mem::replace(&mut self.layers[index], layer);
        if let Err(e) = self.validate() {
            self.layers[index] = old;
            return Err(e);
        }
        Ok(())
    }

    /// Input shape of every layer plus the final output shape.
    pub fn shapes(&self) -> Result<Vec<ActShape>> {
        let mut shapes = Vec::with_capacity(self.layers.len() + 1);
        let mut shape = self.input_shape;
        shapes.push(shape);
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer
                .output_shape(shape)
                .map_err(|e| Error::invalid(format!("layer {i} ({}): {e}", layer.kind())))?;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn output_len(&self) -> usize {
        self.shapes()
            .ok()
            .and_then(|s| s.last().copied())
            .map_or(0, |s| s.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() {
            return Err(Error::invalid("input shape must be non-empty"));
        }
        let Some(last) = self.layers.last() else {
            return Err(Error::invalid("model has no layers"));
        };
        self.shapes()?;
        let head_ok = matches!(last, Layer::Softmax | Layer::Fc(_) | Layer::FactorizedFc(_));
        if !head_ok {
            return Err(Error::invalid(
                "model must end in a single softmax or linear output head",
            ));
        }
        let softmaxes = self
            .layers
            .iter()
            .filter(|l| matches!(l, Layer::Softmax))
            .count();
        if softmaxes > 1 || (softmaxes == 1 && !matches!(last, Layer::Softmax)) {
            return Err(Error::invalid("softmax may only appear as the final layer"));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.params().iter().map(|p| p.len()).sum::<usize>())
            .sum()
    }
}
