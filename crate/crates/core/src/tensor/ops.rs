//! Row-wise normalisation layers and activations, each with its reverse pass.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::Tensor;
use crate::error::{dim_err, param_err, Result};

#[derive(Clone, Debug)]
pub enum NormKind<'a> {
    SoftmaxRows,
    LayerNorm {
        gamma: &'a Tensor,
        beta: &'a Tensor,
        eps: f64,
    },
    Gelu,
}

/// Single dispatch point over the three row-wise primitives.
pub fn norm_and_activation(kind: NormKind<'_>, x: &Tensor) -> Result<Tensor> {
    match kind {
        NormKind::SoftmaxRows => Ok(softmax_rows(x)),
        NormKind::LayerNorm { gamma, beta, eps } => {
            layer_norm(x, gamma, beta, eps).map(|(y, _)| y)
        }
        NormKind::Gelu => Ok(gelu(x)),
    }
}

/// Softmax over the last axis, max-shifted.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    if c == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// Given `p = softmax_rows(s)` and `dp`, returns `ds = p ⊙ (dp − Σ dp⊙p)`.
pub fn softmax_rows_backward(p: &Tensor, dp: &Tensor) -> Tensor {
    let c = p.cols();
    let mut ds = dp.clone();
    for (drow, prow) in ds.data_mut().chunks_mut(c).zip(p.data().chunks(c)) {
        let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
        for (d, &pv) in drow.iter_mut().zip(prow) {
            *d = pv * (*d - dot);
        }
    }
    ds
}

#[derive(Clone, Debug)]
pub struct LayerNormCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
}

/// Layer normalisation over the last axis.
pub fn layer_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormCache)> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(param_err(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let c = x.cols();
    if gamma.len() != c || beta.len() != c {
        return Err(dim_err(format!(
            "layer_norm over {c} features with gamma {:?} / beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    let mut xhat = x.clone();
    let mut y = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for (hrow, yrow) in xhat
        .data_mut()
        .chunks_mut(c)
        .zip(y.data_mut().chunks_mut(c))
    {
        let mean = hrow.iter().sum::<f64>() / c as f64;
        let var = hrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std.push(is);
        for ((h, o), (g, b)) in hrow
            .iter_mut()
            .zip(yrow.iter_mut())
            .zip(gamma.data().iter().zip(beta.data()))
        {
            *h = (*h - mean) * is;
            *o = *h * g + b;
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &Tensor,
    dy: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let c = dy.cols();
    let mut dx = dy.clone();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let n = c as f64;
    for ((dxrow, hrow), &is) in dx
        .data_mut()
        .chunks_mut(c)
        .zip(cache.xhat.data().chunks(c))
        .zip(&cache.inv_std)
    {
        let mut mean_dh = 0.0;
        let mut mean_dh_h = 0.0;
        for j in 0..c {
            let dyv = dxrow[j];
            dgamma[j] += dyv * hrow[j];
            dbeta[j] += dyv;
            let dh = dyv * gamma.data()[j];
            mean_dh += dh;
            mean_dh_h += dh * hrow[j];
        }
        mean_dh /= n;
        mean_dh_h /= n;
        for j in 0..c {
            let dh = dxrow[j] * gamma.data()[j];
            dxrow[j] = is * (dh - mean_dh - hrow[j] * mean_dh_h);
        }
    }
    (
        dx,
        Tensor::new(vec![c], dgamma).expect("length c"),
        Tensor::new(vec![c], dbeta).expect("length c"),
    )
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(|v| v * std_normal_cdf(v))
}

/// `dx = dy · (Φ(x) + x·φ(x))`.
pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    let inv_sqrt_2pi = 1.0 / (2.0 * PI).sqrt();
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        let pdf = inv_sqrt_2pi * (-0.5 * v * v).exp();
        *d *= std_normal_cdf(v) + v * pdf;
    }
    dx
}
