mod common;

use std::collections::BTreeMap;

use common::{gradient_check, normals, random_matrix, random_tensor, rng};
use lowrank::factorization::hosvd;
use lowrank::model::{decompose_fc, substitute_conv, ActShape, BatchNorm, Conv, Fc, Layer};
use rand::Rng;

const TOL: f64 = 1e-4;

fn check(name: &str, layer: Layer, input: ActShape, seed: u64) {
    let err = gradient_check(&layer, input, &mut rng(seed));
    assert!(err <= TOL, "{name}: relative gradient error {err}");
}

#[test]
fn conv_gradients() {
    let mut r = rng(1);
    for (i, (stride, padding)) in [(1, 1), (2, 0), (2, 1)].into_iter().enumerate() {
        let conv = Conv::new(random_tensor(&mut r, &[3, 3, 2, 3]), normals(&mut r, 3), stride, padding).unwrap();
        check("conv", Layer::Conv(conv), ActShape::new(2, 5, 5), 10 + i as u64);
    }
    let pointwise = Conv::new(random_tensor(&mut r, &[1, 1, 3, 4]), normals(&mut r, 4), 1, 0).unwrap();
    check("pointwise conv", Layer::Conv(pointwise), ActShape::new(3, 4, 4), 13);
}

#[test]
fn fc_gradients() {
    let mut r = rng(2);
    let fc = Fc::new(random_matrix(&mut r, 4, 18), normals(&mut r, 4)).unwrap();
    check("fc", Layer::Fc(fc.clone()), ActShape::new(2, 3, 3), 20);
    check("factorized fc", Layer::FactorizedFc(decompose_fc(&fc, 2).unwrap()), ActShape::new(2, 3, 3), 21);
}

#[test]
fn factorized_conv_gradients() {
    let mut r = rng(3);
    for (i, (stride, padding)) in [(1, 1), (2, 1)].into_iter().enumerate() {
        let conv = Conv::new(random_tensor(&mut r, &[3, 3, 4, 5]), normals(&mut r, 5), stride, padding).unwrap();
        let tucker = hosvd(&conv.kernel, &BTreeMap::from([(3, 2), (4, 3)])).unwrap();
        let stack = substitute_conv(&conv, &tucker).unwrap();
        check("factorized conv", Layer::FactorizedConv(stack), ActShape::new(4, 5, 5), 30 + i as u64);
    }
}

#[test]
fn batchnorm_gradients() {
    let mut r = rng(4);
    let bn = BatchNorm {
        mean: normals(&mut r, 3),
        variance: (0..3).map(|_| r.random_range(0.5..2.0)).collect(),
        gamma: normals(&mut r, 3),
        beta: normals(&mut r, 3),
        epsilon: 1e-5,
    };
    check("batch norm", Layer::BatchNorm(bn), ActShape::new(3, 2, 2), 40);
}

#[test]
fn parameter_free_gradients() {
    check("relu", Layer::Relu, ActShape::new(3, 4, 4), 50);
    check("max pool", Layer::MaxPool { size: 2, stride: 2 }, ActShape::new(2, 4, 4), 51);
    check("overlapping max pool", Layer::MaxPool { size: 3, stride: 1 }, ActShape::new(2, 4, 4), 52);
    check("softmax", Layer::Softmax, ActShape::flat(6), 53);
}
