use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::model::{ActShape, Conv, Fc, Layer, ModelGraph};
use crate::tensor::{Matrix, Tensor};

/// He-normal weights with standard deviation `sqrt(2 / fan_in)`.
fn he(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}

fn conv3x3(rng: &mut ChaCha8Rng, s: usize, t: usize) -> Result<Layer> {
    let kernel = Tensor::new(vec![3, 3, s, t], he(rng, 9 * s, 9 * s * t))?;
    Ok(Layer::Conv(Conv::new(kernel, vec![0.0; t], 1, 1)?))
}

fn fc(rng: &mut ChaCha8Rng, inp: usize, out: usize) -> Result<Layer> {
    let weight = Matrix::new(out, inp, he(rng, inp, out * inp))?;
    Ok(Layer::Fc(Fc::new(weight, vec![0.0; out])?))
}

/// Small CNN for `side × side` single-channel images and `classes` outputs:
/// three 3×3 convolutions (8, 32, 48 channels, two of them pooled), a
/// 64-unit hidden FC layer and a softmax head. Weights are He-initialized
/// from `seed`, biases start at zero.
pub fn reference_cnn(side: usize, classes: usize, seed: u64) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pooled = side / 4;
    let layers = vec![
        conv3x3(&mut rng, 1, 8)?,
        Layer::Relu,
        Layer::MaxPool { size: 2, stride: 2 },
        conv3x3(&mut rng, 8, 32)?,
        Layer::Relu,
        Layer::MaxPool { size: 2, stride: 2 },
        conv3x3(&mut rng, 32, 48)?,
        Layer::Relu,
        fc(&mut rng, pooled * pooled * 48, 64)?,
        Layer::Relu,
        fc(&mut rng, 64, classes)?,
        Layer::Softmax,
    ];
    ModelGraph::new("reference-cnn", ActShape::new(1, side, side), layers)
}
