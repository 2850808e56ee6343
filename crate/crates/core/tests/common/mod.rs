//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use lowrank::factorization::thin_qr;
use lowrank::model::{ActShape, Layer};
use lowrank::runtime::{layer_gradients, layer_output};
use lowrank::tensor::{kronecker, matricize, mode_product, Matrix, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), normals(rng, shape.iter().product())).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, normals(rng, rows * cols)).unwrap()
}

/// `n × k` matrix with orthonormal columns.
pub fn random_orthonormal(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Matrix {
    thin_qr(&random_matrix(rng, n, k)).unwrap().0
}

/// `‖a − b‖ / ‖a‖`, or the absolute difference when `a` is zero.
pub fn rel(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        diff
    } else {
        diff / norm
    }
}

/// Largest mismatch, over all modes, between the unfolded mode-product chain
/// and `C⁽ᵏ⁾ · T₍ₖ₎ · (C⁽ᴺ⁾ ⊗ … ⊗ C⁽¹⁾, skipping k)ᵀ` for a random tensor with
/// `ndim` modes and random conforming factors.
pub fn kronecker_identity_error(rng: &mut ChaCha8Rng, ndim: usize) -> f64 {
    let shape: Vec<usize> = (0..ndim).map(|_| rng.random_range(2..=4)).collect();
    let t = random_tensor(rng, &shape);
    let factors: Vec<Matrix> = shape
        .iter()
        .map(|&n| {
            let rows = rng.random_range(1..=4);
            random_matrix(rng, rows, n)
        })
        .collect();
    let chained = factors
        .iter()
        .enumerate()
        .fold(t.clone(), |acc, (i, c)| mode_product(&acc, c, i + 1).unwrap());
    let mut worst: f64 = 0.0;
    for k in 1..=ndim {
        let lhs = matricize(&chained, k).unwrap();
        let chain = (1..=ndim)
            .rev()
            .filter(|&n| n != k)
            .map(|n| factors[n - 1].clone())
            .reduce(|a, b| kronecker(&a, &b))
            .unwrap();
        let rhs = factors[k - 1]
            .matmul(&matricize(&t, k).unwrap())
            .unwrap()
            .matmul(&chain.transpose())
            .unwrap();
        worst = worst.max(rel(lhs.data(), rhs.data()));
    }
    worst
}

/// `U diag(s) Vᵀ` with `rank` planted singular values plus Gaussian noise.
pub fn planted_low_rank(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    rank: usize,
    signal: f64,
    noise: f64,
) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    if rank > 0 {
        let u = random_orthonormal(rng, rows, rank);
        let v = random_orthonormal(rng, cols, rank);
        for r in 0..rank {
            let s = signal * (1.0 + r as f64 / rank as f64);
            for i in 0..rows {
                for j in 0..cols {
                    let x = m.get(i, j) + s * u.get(i, r) * v.get(j, r);
                    m.set(i, j, x);
                }
            }
        }
    }
    let eps = normals(rng, rows * cols);
    for (x, e) in m.data_mut().iter_mut().zip(eps) {
        *x += noise * e;
    }
    m
}

/// Direct convolution over a channels-last input with a `kh × kw × S × T`
/// kernel.
pub fn naive_conv(
    x: &[f64],
    input: ActShape,
    kernel: &Tensor,
    bias: &[f64],
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let [kh, kw, s, t] = *kernel.shape() else { panic!("4-way kernel") };
    let out = ActShape::new(
        t,
        (input.height + 2 * padding - kh) / stride + 1,
        (input.width + 2 * padding - kw) / stride + 1,
    );
    let mut y = vec![0.0; out.len()];
    for oy in 0..out.height {
        for ox in 0..out.width {
            for co in 0..t {
                let mut acc = bias[co];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let iy = (oy * stride + dy) as i64 - padding as i64;
                        let ix = (ox * stride + dx) as i64 - padding as i64;
                        if iy < 0 || ix < 0 || iy >= input.height as i64 || ix >= input.width as i64 {
                            continue;
                        }
                        for ci in 0..s {
                            let xi = (iy as usize * input.width + ix as usize) * s + ci;
                            acc += x[xi] * kernel.get(&[dy, dx, ci, co]);
                        }
                    }
                }
                y[(oy * out.width + ox) * t + co] = acc;
            }
        }
    }
    y
}

/// Worst relative error between analytic and central-difference gradients
/// of `Σ upstream ⊙ layer(x)` with respect to the input and every parameter.
pub fn gradient_check(layer: &Layer, input: ActShape, rng: &mut ChaCha8Rng) -> f64 {
    let x = normals(rng, input.len());
    let out = layer.output_shape(input).unwrap();
    let upstream = normals(rng, out.len());
    let objective = |l: &Layer, x: &[f64]| -> f64 {
        layer_output(l, input, x)
            .unwrap()
            .iter()
            .zip(&upstream)
            .map(|(a, b)| a * b)
            .sum()
    };
    let analytic = layer_gradients(layer, input, &x, &upstream).unwrap();
    let h = 1e-6;

    let mut numeric_input = vec![0.0; x.len()];
    for i in 0..x.len() {
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[i] += h;
        xm[i] -= h;
        numeric_input[i] = (objective(layer, &xp) - objective(layer, &xm)) / (2.0 * h);
    }
    let mut worst = grad_error(&analytic.input, &numeric_input);

    let n_params = layer.params().len();
    for p in 0..n_params {
        let len = layer.params()[p].len();
        let numeric: Vec<f64> = (0..len)
            .map(|i| {
                let mut plus = layer.clone();
                plus.params_mut()[p][i] += h;
                let mut minus = layer.clone();
                minus.params_mut()[p][i] -= h;
                (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * h)
            })
            .collect();
        worst = worst.max(grad_error(&analytic.params[p], &numeric));
    }
    worst
}

fn grad_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}
