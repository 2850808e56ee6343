mod common;

use std::collections::BTreeMap;

use common::{normals, random_matrix, random_orthonormal, random_tensor, rel, rng};
use lowrank::factorization::{hosvd, svd, truncated_svd, Reconstruct};
use lowrank::model::{
    count, fold_batchnorm, substitute_conv, substitute_fc, ActShape, BatchNorm, Conv, Fc, Layer,
    ModelGraph,
};
use lowrank::runtime::layer_output;
use lowrank::tensor::{mode_product, Matrix, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_conv(r: &mut ChaCha8Rng, s: usize, t: usize, stride: usize, padding: usize) -> Conv {
    Conv::new(random_tensor(r, &[3, 3, s, t]), normals(r, t), stride, padding).unwrap()
}

/// Worst relative mismatch between the factorized stack and a plain conv
/// using the reconstructed kernel, over `trials` random inputs.
fn stack_vs_reconstructed(conv: &Conv, ranks: (usize, usize), input: ActShape, r: &mut ChaCha8Rng, trials: usize) -> f64 {
    let tucker = hosvd(&conv.kernel, &BTreeMap::from([(3, ranks.0), (4, ranks.1)])).unwrap();
    let stack = Layer::FactorizedConv(substitute_conv(conv, &tucker).unwrap());
    let rebuilt = Layer::Conv(Conv::new(tucker.reconstruct(), conv.bias.clone(), conv.stride, conv.padding).unwrap());
    assert_eq!(stack.output_shape(input).unwrap(), rebuilt.output_shape(input).unwrap());
    (0..trials)
        .map(|_| {
            let x = normals(r, input.len());
            rel(&layer_output(&rebuilt, input, &x).unwrap(), &layer_output(&stack, input, &x).unwrap())
        })
        .fold(0.0, f64::max)
}

#[test]
fn full_rank_stack_equals_original_conv() {
    let mut r = rng(1);
    let conv = random_conv(&mut r, 5, 7, 1, 1);
    let input = ActShape::new(5, 6, 6);
    let tucker = hosvd(&conv.kernel, &BTreeMap::from([(3, 5), (4, 7)])).unwrap();
    let stack = Layer::FactorizedConv(substitute_conv(&conv, &tucker).unwrap());
    let plain = Layer::Conv(conv);
    for _ in 0..10 {
        let x = normals(&mut r, input.len());
        assert!(rel(&layer_output(&plain, input, &x).unwrap(), &layer_output(&stack, input, &x).unwrap()) <= 1e-6);
    }
}

#[test]
fn planted_kernel_at_true_ranks_is_exact() {
    let mut r = rng(2);
    let core = random_tensor(&mut r, &[3, 3, 2, 3]);
    let kernel = mode_product(
        &mode_product(&core, &random_orthonormal(&mut r, 6, 2), 3).unwrap(),
        &random_orthonormal(&mut r, 8, 3),
        4,
    )
    .unwrap();
    let conv = Conv::new(kernel, normals(&mut r, 8), 1, 1).unwrap();
    let input = ActShape::new(6, 5, 5);
    let tucker = hosvd(&conv.kernel, &BTreeMap::from([(3, 2), (4, 3)])).unwrap();
    let stack = Layer::FactorizedConv(substitute_conv(&conv, &tucker).unwrap());
    let plain = Layer::Conv(conv);
    for _ in 0..10 {
        let x = normals(&mut r, input.len());
        assert!(rel(&layer_output(&plain, input, &x).unwrap(), &layer_output(&stack, input, &x).unwrap()) <= 1e-6);
    }
}

#[test]
fn reduced_rank_stack_matches_reconstructed_kernel() {
    let mut r = rng(3);
    for (stride, padding) in [(1, 1), (2, 0), (2, 1), (1, 0)] {
        let conv = random_conv(&mut r, 8, 10, stride, padding);
        let err = stack_vs_reconstructed(&conv, (3, 4), ActShape::new(8, 7, 7), &mut r, 20);
        assert!(err <= 1e-5, "stride {stride} padding {padding}: {err}");
    }
}

#[test]
fn fc_substitution_matches_matrix_chain() {
    let mut r = rng(4);
    let w = random_matrix(&mut r, 12, 20);
    let fc = Fc::new(w.clone(), normals(&mut r, 12)).unwrap();
    let input = ActShape::flat(20);
    for p in [12, 6, 1] {
        let res = truncated_svd(&w, p).unwrap();
        let stack = Layer::FactorizedFc(substitute_fc(&fc, &res).unwrap());
        let rebuilt = Layer::Fc(Fc::new(res.reconstruct(), fc.bias.clone()).unwrap());
        for _ in 0..20 {
            let x = normals(&mut r, 20);
            let e = rel(&layer_output(&rebuilt, input, &x).unwrap(), &layer_output(&stack, input, &x).unwrap());
            assert!(e <= 1e-8, "p = {p}: {e}");
        }
    }
    // A rank-one weight is reproduced exactly at p = 1.
    let u = normals(&mut r, 5);
    let v = normals(&mut r, 4);
    let w1 = Matrix::from_fn(5, 4, |i, j| u[i] * v[j]);
    let fc1 = Fc::new(w1.clone(), vec![0.0; 5]).unwrap();
    let stack = Layer::FactorizedFc(substitute_fc(&fc1, &svd(&w1).unwrap().truncate(1).unwrap()).unwrap());
    let x = normals(&mut r, 4);
    let direct = layer_output(&Layer::Fc(fc1), ActShape::flat(4), &x).unwrap();
    assert!(rel(&direct, &layer_output(&stack, ActShape::flat(4), &x).unwrap()) <= 1e-8);
}

#[test]
fn factorized_conv_is_cheaper_exactly_when_inequality_holds() {
    let s = 32;
    let t = 64;
    let input = ActShape::new(s, 8, 8);
    let conv = Conv::new(Tensor::zeros(&[3, 3, s, t]).unwrap(), vec![0.0; t], 1, 1).unwrap();
    let mut r = rng(5);
    for _ in 0..20 {
        let r3 = r.random_range(1..=s);
        let r4 = r.random_range(1..=t);
        let tucker = hosvd(&conv.kernel, &BTreeMap::from([(3, r3), (4, r4)])).unwrap();
        let stack = substitute_conv(&conv, &tucker).unwrap();
        let model = |l: Layer| {
            ModelGraph::new("c", input, vec![l, Layer::Fc(Fc::new(Matrix::zeros(2, 64 * t), vec![0.0; 2]).unwrap())]).unwrap()
        };
        let before = count(&model(Layer::Conv(conv.clone()))).unwrap().layers[0].params;
        let after = count(&model(Layer::FactorizedConv(stack))).unwrap().layers[0].params;
        let cheaper = s * r3 + 9 * r3 * r4 + r4 * t < 9 * s * t;
        assert_eq!(after < before, cheaper);
    }
}

fn run(model: &ModelGraph, x: &[f64]) -> Vec<f64> {
    let shapes = model.shapes().unwrap();
    model
        .layers()
        .iter()
        .zip(&shapes)
        .fold(x.to_vec(), |act, (layer, &shape)| layer_output(layer, shape, &act).unwrap())
}

fn random_bn(r: &mut ChaCha8Rng, c: usize) -> Layer {
    Layer::BatchNorm(BatchNorm {
        mean: normals(r, c),
        variance: (0..c).map(|_| r.random_range(0.2..3.0)).collect(),
        gamma: normals(r, c),
        beta: normals(r, c),
        epsilon: 1e-5,
    })
}

#[test]
fn batchnorm_folding_preserves_outputs() {
    let mut r = rng(6);
    let input = ActShape::new(3, 6, 6);
    let tucker_conv = random_conv(&mut r, 6, 8, 1, 1);
    let stack = substitute_conv(
        &tucker_conv,
        &hosvd(&tucker_conv.kernel, &BTreeMap::from([(3, 3), (4, 4)])).unwrap(),
    )
    .unwrap();
    let fc = Fc::new(random_matrix(&mut r, 10, 8 * 36), normals(&mut r, 10)).unwrap();
    let model = ModelGraph::new(
        "bn",
        input,
        vec![
            Layer::Conv(random_conv(&mut r, 3, 6, 1, 1)),
            random_bn(&mut r, 6),
            Layer::Relu,
            Layer::FactorizedConv(stack),
            random_bn(&mut r, 8),
            Layer::Relu,
            Layer::Fc(fc),
            random_bn(&mut r, 10),
            Layer::Relu,
            Layer::Fc(Fc::new(random_matrix(&mut r, 4, 10), normals(&mut r, 4)).unwrap()),
        ],
    )
    .unwrap();
    let folded = fold_batchnorm(&model).unwrap();
    assert!(folded.layers().iter().all(|l| !matches!(l, Layer::BatchNorm(_))));
    assert_eq!(fold_batchnorm(&folded).unwrap(), folded);
    for _ in 0..10 {
        let x = normals(&mut r, input.len());
        assert!(rel(&run(&model, &x), &run(&folded, &x)) <= 1e-6);
    }
}
