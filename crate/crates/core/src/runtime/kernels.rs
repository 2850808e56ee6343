//! Per-sample forward and backward passes. Activations are `H × W × C`.

use crate::linalg::{gemm, View};
use crate::model::{kernel_dims, ActShape, BatchNorm, Layer};
use crate::tensor::Tensor;

/// What a layer's backward pass needs from its forward pass.
pub(crate) enum Cache {
    Conv(ConvCache),
    FactorizedConv([ConvCache; 3]),
    Fc { input: Vec<f64> },
    FactorizedFc { input: Vec<f64>, hidden: Vec<f64> },
    BatchNorm { input: Vec<f64> },
    Relu { output: Vec<f64> },
    MaxPool { argmax: Vec<usize> },
    Softmax { output: Vec<f64> },
}

pub(crate) struct ConvCache {
    input_shape: ActShape,
    /// `positions × (kh·kw·S)` patch matrix.
    patches: Vec<f64>,
}

pub(crate) struct ConvGeom {
    kh: usize,
    kw: usize,
    s: usize,
    t: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn of(kernel: &Tensor, stride: usize, padding: usize) -> Self {
        let (kh, kw, s, t) = kernel_dims(kernel);
        ConvGeom {
            kh,
            kw,
            s,
            t,
            stride,
            padding,
        }
    }

    fn out_dims(&self, input: ActShape) -> (usize, usize) {
        (
            (input.height + 2 * self.padding - self.kh) / self.stride + 1,
            (input.width + 2 * self.padding - self.kw) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col(x: &[f64], input: ActShape, g: &ConvGeom) -> Vec<f64> {
    if g.is_pointwise() {
        return x.to_vec();
    }
    let (oh, ow) = g.out_dims(input);
    let width = g.kh * g.kw * g.s;
    let mut p = vec![0.0; oh * ow * width];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut p[(oy * ow + ox) * width..(oy * ow + ox + 1) * width];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= input.height as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= input.width as isize {
                        continue;
                    }
                    let src = (iy as usize * input.width + ix as usize) * g.s;
                    let dst = (ky * g.kw + kx) * g.s;
                    row[dst..dst + g.s].copy_from_slice(&x[src..src + g.s]);
                }
            }
        }
    }
    p
}

fn col2im(dp: &[f64], input: ActShape, g: &ConvGeom) -> Vec<f64> {
    if g.is_pointwise() {
        return dp.to_vec();
    }
    let (oh, ow) = g.out_dims(input);
    let width = g.kh * g.kw * g.s;
    let mut dx = vec![0.0; input.len()];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &dp[(oy * ow + ox) * width..(oy * ow + ox + 1) * width];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                if iy < 0 || iy >= input.height as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                    if ix < 0 || ix >= input.width as isize {
                        continue;
                    }
                    let dst = (iy as usize * input.width + ix as usize) * g.s;
                    let src = (ky * g.kw + kx) * g.s;
                    for c in 0..g.s {
                        dx[dst + c] += row[src + c];
                    }
                }
            }
        }
    }
    dx
}

fn conv_forward(
    x: &[f64],
    input: ActShape,
    kernel: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, ActShape, ConvCache) {
    let g = ConvGeom::of(kernel, stride, padding);
    let (oh, ow) = g.out_dims(input);
    let patches = im2col(x, input, &g);
    let positions = oh * ow;
    let width = g.kh * g.kw * g.s;
    let mut y = vec![0.0; positions * g.t];
    if let Some(b) = bias {
        for row in y.chunks_mut(g.t) {
            row.copy_from_slice(b);
        }
    }
    gemm(
        1.0,
        View::row_major(&patches, positions, width),
        View::row_major(kernel.data(), width, g.t),
        1.0,
        &mut y,
    );
    (
        y,
        ActShape::new(g.t, oh, ow),
        ConvCache {
            input_shape: input,
            patches,
        },
    )
}

/// Returns `(dx, dkernel, dbias)`.
fn conv_backward(
    cache: &ConvCache,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let g = ConvGeom::of(kernel, stride, padding);
    let positions = dy.len() / g.t;
    let width = g.kh * g.kw * g.s;
    let mut dk = vec![0.0; width * g.t];
    gemm(
        1.0,
        View::row_major(&cache.patches, positions, width).t(),
        View::row_major(dy, positions, g.t),
        0.0,
        &mut dk,
    );
    let mut db = vec![0.0; g.t];
    for row in dy.chunks(g.t) {
        db.iter_mut().zip(row).for_each(|(b, d)| *b += d);
    }
    let mut dp = vec![0.0; positions * width];
    gemm(
        1.0,
        View::row_major(dy, positions, g.t),
        View::row_major(kernel.data(), width, g.t).t(),
        0.0,
        &mut dp,
    );
    (col2im(&dp, cache.input_shape, &g), dk, db)
}

/// `y = W x` for row-major `W` (`rows × cols`).
fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; rows];
    gemm(1.0, View::row_major(w, rows, cols), View::row_major(x, cols, 1), 0.0, &mut y);
    y
}

/// `Wᵀ dy`.
fn matvec_t(w: &[f64], rows: usize, cols: usize, dy: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; cols];
    gemm(1.0, View::row_major(w, rows, cols).t(), View::row_major(dy, rows, 1), 0.0, &mut dx);
    dx
}

fn outer(dy: &[f64], x: &[f64]) -> Vec<f64> {
    let mut g = Vec::with_capacity(dy.len() * x.len());
    for &d in dy {
        g.extend(x.iter().map(|v| d * v));
    }
    g
}

fn bn_scale(bn: &BatchNorm) -> Vec<f64> {
    bn.variance
        .iter()
        .map(|v| 1.0 / (v + bn.epsilon).sqrt())
        .collect()
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Forward one layer. The input shape must already be validated.
pub(crate) fn forward(layer: &Layer, x: &[f64], shape: ActShape) -> (Vec<f64>, ActShape, Cache) {
    match layer {
        Layer::Conv(c) => {
            let (y, s, cache) = conv_forward(x, shape, &c.kernel, Some(&c.bias), c.stride, c.padding);
            (y, s, Cache::Conv(cache))
        }
        Layer::FactorizedConv(f) => {
            let (h1, s1, c1) = conv_forward(x, shape, &f.first, None, 1, 0);
            let (h2, s2, c2) = conv_forward(&h1, s1, &f.middle, None, f.stride, f.padding);
            let (y, s3, c3) = conv_forward(&h2, s2, &f.last, Some(&f.bias), 1, 0);
            (y, s3, Cache::FactorizedConv([c1, c2, c3]))
        }
        Layer::Fc(f) => {
            let (rows, cols) = (f.weight.rows(), f.weight.cols());
            let mut y = matvec(f.weight.data(), rows, cols, x);
            y.iter_mut().zip(&f.bias).for_each(|(v, b)| *v += b);
            (y, ActShape::flat(rows), Cache::Fc { input: x.to_vec() })
        }
        Layer::FactorizedFc(f) => {
            let hidden = matvec(f.first.data(), f.first.rows(), f.first.cols(), x);
            let mut y = matvec(f.last.data(), f.last.rows(), f.last.cols(), &hidden);
            y.iter_mut().zip(&f.bias).for_each(|(v, b)| *v += b);
            (
                y,
                ActShape::flat(f.last.rows()),
                Cache::FactorizedFc {
                    input: x.to_vec(),
                    hidden,
                },
            )
        }
        Layer::BatchNorm(bn) => {
            let inv = bn_scale(bn);
            let c = bn.channels();
            let y = x
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let ch = i % c;
                    bn.gamma[ch] * (v - bn.mean[ch]) * inv[ch] + bn.beta[ch]
                })
                .collect();
            (y, shape, Cache::BatchNorm { input: x.to_vec() })
        }
        Layer::Relu => {
            let y: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
            (y.clone(), shape, Cache::Relu { output: y })
        }
        Layer::MaxPool { size, stride } => {
            let (oh, ow) = (
                (shape.height - size) / stride + 1,
                (shape.width - size) / stride + 1,
            );
            let c = shape.channels;
            let mut y = vec![f64::NEG_INFINITY; oh * ow * c];
            let mut argmax = vec![0; oh * ow * c];
            for oy in 0..oh {
                for ox in 0..ow {
                    for ky in 0..*size {
                        for kx in 0..*size {
                            let src = ((oy * stride + ky) * shape.width + ox * stride + kx) * c;
                            let dst = (oy * ow + ox) * c;
                            for ch in 0..c {
                                if x[src + ch] > y[dst + ch] {
                                    y[dst + ch] = x[src + ch];
                                    argmax[dst + ch] = src + ch;
                                }
                            }
                        }
                    }
                }
            }
            (y, ActShape::new(c, oh, ow), Cache::MaxPool { argmax })
        }
        Layer::Softmax => {
            let y = softmax(x);
            (y.clone(), shape, Cache::Softmax { output: y })
        }
    }
}

/// Backward one layer: returns the input gradient and one gradient per
/// entry of [`Layer::params`].
pub(crate) fn backward(
    layer: &Layer,
    cache: &Cache,
    input_len: usize,
    dy: &[f64],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    match (layer, cache) {
        (Layer::Conv(c), Cache::Conv(cc)) => {
            let (dx, dk, db) = conv_backward(cc, &c.kernel, c.stride, c.padding, dy);
            (dx, vec![dk, db])
        }
        (Layer::FactorizedConv(f), Cache::FactorizedConv([c1, c2, c3])) => {
            let (dh2, dlast, db) = conv_backward(c3, &f.last, 1, 0, dy);
            let (dh1, dmiddle, _) = conv_backward(c2, &f.middle, f.stride, f.padding, &dh2);
            let (dx, dfirst, _) = conv_backward(c1, &f.first, 1, 0, &dh1);
            (dx, vec![dfirst, dmiddle, dlast, db])
        }
        (Layer::Fc(f), Cache::Fc { input }) => {
            let dx = matvec_t(f.weight.data(), f.weight.rows(), f.weight.cols(), dy);
            (dx, vec![outer(dy, input), dy.to_vec()])
        }
        (Layer::FactorizedFc(f), Cache::FactorizedFc { input, hidden }) => {
            let dh = matvec_t(f.last.data(), f.last.rows(), f.last.cols(), dy);
            let dx = matvec_t(f.first.data(), f.first.rows(), f.first.cols(), &dh);
            (dx, vec![outer(&dh, input), outer(dy, hidden), dy.to_vec()])
        }
        (Layer::BatchNorm(bn), Cache::BatchNorm { input }) => {
            let inv = bn_scale(bn);
            let c = bn.channels();
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            let mut dx = vec![0.0; input.len()];
            for (i, (&d, &v)) in dy.iter().zip(input).enumerate() {
                let ch = i % c;
                dx[i] = d * bn.gamma[ch] * inv[ch];
                dgamma[ch] += d * (v - bn.mean[ch]) * inv[ch];
                dbeta[ch] += d;
            }
            (dx, vec![dgamma, dbeta])
        }
        (Layer::Relu, Cache::Relu { output }) => (
            dy.iter()
                .zip(output)
                .map(|(d, y)| if *y > 0.0 { *d } else { 0.0 })
                .collect(),
            vec![],
        ),
        (Layer::MaxPool { .. }, Cache::MaxPool { argmax }) => {
            let mut dx = vec![0.0; input_len];
            for (d, &src) in dy.iter().zip(argmax) {
                dx[src] += d;
            }
            (dx, vec![])
        }
        (Layer::Softmax, Cache::Softmax { output }) => {
            let dot: f64 = dy.iter().zip(output).map(|(d, p)| d * p).sum();
            (
                output.iter().zip(dy).map(|(p, d)| p * (d - dot)).collect(),
                vec![],
            )
        }
        _ => unreachable!("cache does not belong to layer"),
    }
}
