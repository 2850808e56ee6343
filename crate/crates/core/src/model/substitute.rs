//! Replacing dense layers by their factorized equivalents.
//!
//! A factorized layer whose outer factors are re-orthonormalized is itself a
//! Tucker (or SVD) form of the kernel it computes: for a conv stack,
//! `K = B ×₃ F ×₄ Gᵀ` where `F = first` (`S × R₃`) and `G = last` (`R₄ × T`).
//! With `F = Q₃R₃` and `Gᵀ = Q₄R₄` the same kernel is `(B ×₃ R₃ ×₄ R₄) ×₃ Q₃ ×₄ Q₄`,
//! whose small core carries every singular value of the full kernel's
//! channel unfoldings. Re-decomposition on later iterations works on that core
//! and folds the new factors back into the 1×1 kernels, so the stack never
//! grows deeper.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::factorization::{hosvd, thin_qr, truncated_svd, SvdResult, TuckerResult};
use crate::model::{kernel_dims, Conv, FactorizedConv, FactorizedFc, Fc};
use crate::tensor::{mode_product, Matrix, Tensor};

/// Builds the 1×1 / kh×kw / 1×1 stack from a HOSVD of `layer.kernel` over modes 3 and 4.
pub fn substitute_conv(layer: &Conv, tucker: &TuckerResult) -> Result<FactorizedConv> {
    let (kh, kw, s, t) = kernel_dims(&layer.kernel);
    factorized_from_tucker((kh, kw, s, t), layer.stride, layer.padding, &layer.bias, tucker)
}

fn factorized_from_tucker(
    (kh, kw, s, t): (usize, usize, usize, usize),
    stride: usize,
    padding: usize,
    bias: &[f64],
    tucker: &TuckerResult,
) -> Result<FactorizedConv> {
    if tucker.decomposed_modes().into_iter().collect::<Vec<_>>() != [3, 4] {
        return Err(Error::invalid(
            "conv substitution needs a Tucker result over exactly modes 3 and 4",
        ));
    }
    let c3 = &tucker.factors[&3];
    let c4 = &tucker.factors[&4];
    let (r3, r4) = (c3.cols(), c4.cols());
    if c3.rows() != s || c4.rows() != t {
        return Err(Error::invalid(format!(
            "factor shapes {}x{} / {}x{} do not match kernel channels {s}->{t}",
            c3.rows(),
            r3,
            c4.rows(),
            r4
        )));
    }
    if r3 == 0 || r3 > s || r4 == 0 || r4 > t {
        return Err(Error::invalid(format!(
            "ranks ({r3}, {r4}) outside [1, {s}] x [1, {t}]"
        )));
    }
    if tucker.core.shape() != [kh, kw, r3, r4] {
        return Err(Error::invalid(format!(
            "core shape {:?} does not match {kh}x{kw}x{r3}x{r4}",
            tucker.core.shape()
        )));
    }
    // Row-major 1×1×S×R₃ is exactly C³ (S×R₃); 1×1×R₄×T is (C⁴)ᵀ.
    let first = Tensor::new(vec![1, 1, s, r3], c3.data().to_vec())?;
    let last = Tensor::new(vec![1, 1, r4, t], c4.transpose().into_data())?;
    Ok(FactorizedConv {
        first,
        middle: tucker.core.clone(),
        last,
        bias: bias.to_vec(),
        stride,
        padding,
    })
}

/// Splits `U·S·Vᵀ` as `(U·S^½)(S^½·Vᵀ)`.
pub fn substitute_fc(layer: &Fc, svd: &SvdResult) -> Result<FactorizedFc> {
    let (out, inp) = (layer.weight.rows(), layer.weight.cols());
    fc_from_svd(out, inp, &layer.bias, svd)
}

fn fc_from_svd(out: usize, inp: usize, bias: &[f64], svd: &SvdResult) -> Result<FactorizedFc> {
    let p = svd.rank();
    if svd.u.rows() != out || svd.v.rows() != inp {
        return Err(Error::invalid(format!(
            "SVD factors {}x{p} / {}x{p} do not match a {out}x{inp} weight",
            svd.u.rows(),
            svd.v.rows()
        )));
    }
    if p == 0 || p > out.min(inp) {
        return Err(Error::invalid(format!(
            "rank {p} outside [1, {}]",
            out.min(inp)
        )));
    }
    let root: Vec<f64> = svd.s.iter().map(|s| s.sqrt()).collect();
    let first = Matrix::from_fn(p, inp, |k, j| root[k] * svd.v.get(j, k));
    let last = Matrix::from_fn(out, p, |i, k| svd.u.get(i, k) * root[k]);
    Ok(FactorizedFc {
        first,
        last,
        bias: bias.to_vec(),
    })
}

/// HOSVD of the kernel over modes 3 and 4 at `(r3, r4)`, substituted.
pub fn decompose_conv(layer: &Conv, r3: usize, r4: usize) -> Result<FactorizedConv> {
    let tucker = hosvd(&layer.kernel, &BTreeMap::from([(3, r3), (4, r4)]))?;
    substitute_conv(layer, &tucker)
}

/// Truncated SVD of the weight at rank `p`, substituted.
pub fn decompose_fc(layer: &Fc, p: usize) -> Result<FactorizedFc> {
    let svd = truncated_svd(&layer.weight, p)?;
    substitute_fc(layer, &svd)
}

/// Orthonormal outer factors `Q₃` (`S × R₃`), `Q₄` (`T × R₄`) and the core
/// `kh × kw × R₃ × R₄` such that the stack's kernel is `core ×₃ Q₃ ×₄ Q₄`.
pub fn canonical_conv_core(layer: &FactorizedConv) -> Result<(Matrix, Tensor, Matrix)> {
    let (_, _, s, r3) = kernel_dims(&layer.first);
    let (_, _, r4, t) = kernel_dims(&layer.last);
    let f = Matrix::new(s, r3, layer.first.data().to_vec())?;
    let g_t = Matrix::new(r4, t, layer.last.data().to_vec())?.transpose();
    let (q3, rr3) = thin_qr(&f)?;
    let (q4, rr4) = thin_qr(&g_t)?;
    let core = mode_product(&layer.middle, &rr3, 3)?;
    let core = mode_product(&core, &rr4, 4)?;
    Ok((q3, core, q4))
}

/// Orthonormal `Q_out` (`out × p`), core (`p × p`) and `Q_in` (`in × p`) with
/// `last · first = Q_out · core · Q_inᵀ`.
pub fn canonical_fc_core(layer: &FactorizedFc) -> Result<(Matrix, Matrix, Matrix)> {
    let (q_out, r_out) = thin_qr(&layer.last)?;
    let (q_in, r_in) = thin_qr(&layer.first.transpose())?;
    let core = r_out.matmul(&r_in.transpose())?;
    Ok((q_out, core, q_in))
}

/// Re-decomposes a factorized conv at new ranks `(r3, r4)` (each at most the
/// current rank), equivalent to HOSVD of the kernel the stack computes.
pub fn refactor_conv(layer: &FactorizedConv, r3: usize, r4: usize) -> Result<FactorizedConv> {
    let (cur3, cur4) = layer.ranks();
    if r3 == 0 || r3 > cur3 || r4 == 0 || r4 > cur4 {
        return Err(Error::invalid(format!(
            "new ranks ({r3}, {r4}) outside [1, {cur3}] x [1, {cur4}]"
        )));
    }
    let (q3, core, q4) = canonical_conv_core(layer)?;
    let inner = hosvd(&core, &BTreeMap::from([(3, r3), (4, r4)]))?;
    let tucker = TuckerResult {
        core: inner.core,
        factors: BTreeMap::from([
            (3, q3.matmul(&inner.factors[&3])?),
            (4, q4.matmul(&inner.factors[&4])?),
        ]),
    };
    let (kh, kw, _, _) = kernel_dims(&layer.middle);
    factorized_from_tucker(
        (kh, kw, layer.in_channels(), layer.out_channels()),
        layer.stride,
        layer.padding,
        &layer.bias,
        &tucker,
    )
}

/// Re-decomposes a factorized FC at rank `p` (at most the current rank),
/// equivalent to a truncated SVD of `last · first`.
pub fn refactor_fc(layer: &FactorizedFc, p: usize) -> Result<FactorizedFc> {
    if p == 0 || p > layer.rank() {
        return Err(Error::invalid(format!(
            "new rank {p} outside [1, {}]",
            layer.rank()
        )));
    }
    let (q_out, core, q_in) = canonical_fc_core(layer)?;
    let inner = truncated_svd(&core, p)?;
    let svd = SvdResult {
        u: q_out.matmul(&inner.u)?,
        s: inner.s,
        v: q_in.matmul(&inner.v)?,
    };
    fc_from_svd(layer.last.rows(), layer.first.cols(), &layer.bias, &svd)
}
