use super::standard::{check_qkv, standard_backward, standard_forward, StandardCache};
use crate::error::{dim_err, param_err, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub(crate) struct LinformerCache {
    k_proj: Tensor,
    v_proj: Tensor,
    inner: StandardCache,
}

/// `softmax(Q·(E·K)ᵀ/√d_h)·(F·V)` with `E, F: m × N`.
pub fn linformer_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    e: &Tensor,
    f: &Tensor,
) -> Result<Tensor> {
    linformer_forward(q, k, v, e, f).map(|(o, _)| o)
}

pub(crate) fn linformer_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    e: &Tensor,
    f: &Tensor,
) -> Result<(Tensor, LinformerCache)> {
    check_qkv(q, k, v)?;
    let n = k.rows();
    if e.rank() != 2 || f.rank() != 2 || e.shape() != f.shape() || e.cols() != n {
        return Err(dim_err(format!(
            "Linformer projections E {:?} / F {:?} must both be m × {n}",
            e.shape(),
            f.shape()
        )));
    }
    if e.rows() == 0 {
        return Err(param_err("Linformer projection dimension m must be ≥ 1"));
    }
    let k_proj = e.matmul(k)?;
    let v_proj = f.matmul(v)?;
    let (out, inner) = standard_forward(q, &k_proj, &v_proj)?;
    Ok((
        out,
        LinformerCache {
            k_proj,
            v_proj,
            inner,
        },
    ))
}

/// Returns `(dQ, dK, dV, dE, dF)`.
pub(crate) fn linformer_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    e: &Tensor,
    f: &Tensor,
    cache: &LinformerCache,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor, Tensor, Tensor)> {
    let (dq, dkp, dvp) = standard_backward(q, &cache.k_proj, &cache.v_proj, &cache.inner, dout)?;
    let dk = e.matmul_tn(&dkp)?;
    let de = dkp.matmul_nt(k)?;
    let dv = f.matmul_tn(&dvp)?;
    let df = dvp.matmul_nt(v)?;
    Ok((dq, dk, dv, de, df))
}
