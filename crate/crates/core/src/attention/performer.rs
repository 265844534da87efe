//! Positive orthogonal random features (FAVOR+).
//!
//! `φ(x)_j = m^(-1/2)·exp(ω_jᵀx − ‖x‖²/2)` gives `E[φ(q)ᵀφ(k)] = exp(qᵀk)`
//! when each `ω_j ~ N(0, I)`. Rows inside a block of `d_h` are made exactly
//! orthogonal; their lengths are redrawn from the chi distribution so the
//! marginals stay Gaussian.

use super::standard::check_qkv;
use crate::error::{dim_err, param_err, Error, Result};
use crate::tensor::{Rng, Tensor};

const NORMALIZER_FLOOR: f64 = 1e-30;

/// Orthonormal random directions: `m × d_h`, built from QR (Gram–Schmidt) of
/// Gaussian blocks of at most `d_h` rows.
pub fn orthogonal_directions(m: usize, dh: usize, rng: &mut Rng) -> Tensor {
    let mut out = Tensor::zeros(&[m, dh]);
    let mut row = 0;
    while row < m {
        let block = (m - row).min(dh);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(block);
        while basis.len() < block {
            let mut g: Vec<f64> = (0..dh).map(|_| rng.normal()).collect();
            // Two Gram–Schmidt passes keep orthogonality at rounding level.
            for _ in 0..2 {
                for b in &basis {
                    let dot: f64 = g.iter().zip(b).map(|(x, y)| x * y).sum();
                    g.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
                }
            }
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                g.iter_mut().for_each(|x| *x /= norm);
                basis.push(g);
            }
        }
        for b in basis {
            out.row_mut(row).copy_from_slice(&b);
            row += 1;
        }
    }
    out
}

/// Feature matrix `Ω: m × d_h`: orthogonal directions scaled by chi(d_h) lengths.
pub fn orthogonal_features(m: usize, dh: usize, rng: &mut Rng) -> Tensor {
    let mut omega = orthogonal_directions(m, dh, rng);
    for i in 0..m {
        let len = (0..dh).map(|_| rng.normal().powi(2)).sum::<f64>().sqrt();
        omega.row_mut(i).iter_mut().for_each(|x| *x *= len);
    }
    omega
}

fn check_omega(omega: &Tensor, dh: usize) -> Result<usize> {
    if omega.rank() != 2 || omega.cols() != dh {
        return Err(dim_err(format!(
            "feature matrix {:?} does not match head dimension {dh}",
            omega.shape()
        )));
    }
    let m = omega.rows();
    if m == 0 {
        return Err(param_err("Performer feature count m must be ≥ 1"));
    }
    Ok(m)
}

/// Exact positive feature map, `N × m`.
pub fn performer_features(x: &Tensor, omega: &Tensor) -> Result<Tensor> {
    if x.rank() != 2 {
        return Err(dim_err(format!("features of non-matrix {:?}", x.shape())));
    }
    let m = check_omega(omega, x.cols())?;
    let z = x.matmul_nt(omega)?;
    let c = 1.0 / (m as f64).sqrt();
    let mut out = z;
    for i in 0..x.rows() {
        let half_sq = 0.5 * x.row(i).iter().map(|v| v * v).sum::<f64>();
        out.row_mut(i)
            .iter_mut()
            .for_each(|v| *v = c * (*v - half_sq).exp());
    }
    Ok(out)
}

/// Log-features `XΩᵀ − ‖x‖²/2` with a stabiliser subtracted before `exp`:
/// per row for queries, one global shift for keys. Both shifts cancel in
/// the row normalisation.
fn stabilized_features(x: &Tensor, omega: &Tensor, per_row: bool) -> Result<Tensor> {
    let mut z = x.matmul_nt(omega)?;
    for i in 0..x.rows() {
        let half_sq = 0.5 * x.row(i).iter().map(|v| v * v).sum::<f64>();
        z.row_mut(i).iter_mut().for_each(|v| *v -= half_sq);
    }
    if per_row {
        for i in 0..z.rows() {
            let row = z.row_mut(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - mx).exp());
        }
    } else {
        let mx = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        z.data_mut().iter_mut().for_each(|v| *v = (*v - mx).exp());
    }
    Ok(z)
}

#[derive(Clone, Debug)]
pub(crate) struct PerformerCache {
    scale: f64,
    qs: Tensor,
    ks: Tensor,
    phi_q: Tensor,
    phi_k: Tensor,
    kv: Tensor,
    ksum: Tensor,
    den: Vec<f64>,
    out: Tensor,
}

/// `D⁻¹·φ(Q)(φ(K)ᵀV)` with `D = diag(φ(Q)(φ(K)ᵀ1))`; queries and keys are
/// pre-scaled by `d_h^(-1/4)`.
pub fn performer_attention(q: &Tensor, k: &Tensor, v: &Tensor, omega: &Tensor) -> Result<Tensor> {
    performer_forward(q, k, v, omega).map(|(o, _)| o)
}

pub(crate) fn performer_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    omega: &Tensor,
) -> Result<(Tensor, PerformerCache)> {
    let dh = check_qkv(q, k, v)?;
    check_omega(omega, dh)?;
    let scale = (dh as f64).powf(-0.25);
    let qs = q.scale(scale);
    let ks = k.scale(scale);
    let phi_q = stabilized_features(&qs, omega, true)?;
    let phi_k = stabilized_features(&ks, omega, false)?;
    let kv = phi_k.matmul_tn(v)?;
    let ksum = phi_k.sum_rows();
    let mut out = phi_q.matmul(&kv)?;
    let mut den = Vec::with_capacity(q.rows());
    for i in 0..q.rows() {
        let d: f64 = phi_q.row(i).iter().zip(ksum.data()).map(|(a, b)| a * b).sum();
        if !(d >= NORMALIZER_FLOOR) {
            return Err(Error::Numerical(format!(
                "Performer normalizer underflow at row {i} ({d:e})"
            )));
        }
        out.row_mut(i).iter_mut().for_each(|x| *x /= d);
        den.push(d);
    }
    let cache = PerformerCache {
        scale,
        qs,
        ks,
        phi_q,
        phi_k,
        kv,
        ksum,
        den,
        out: out.clone(),
    };
    Ok((out, cache))
}

/// Reverse of `exp(XΩᵀ − ‖x‖²/2 − c)` with `c` held fixed.
fn features_backward(x: &Tensor, omega: &Tensor, phi: &Tensor, dphi: &Tensor) -> Result<Tensor> {
    let dz = dphi.mul(phi)?;
    let mut dx = dz.matmul(omega)?;
    for i in 0..x.rows() {
        let s: f64 = dz.row(i).iter().sum();
        for (d, xv) in dx.row_mut(i).iter_mut().zip(x.row(i)) {
            *d -= s * xv;
        }
    }
    Ok(dx)
}

/// Returns `(dQ, dK, dV)`; the feature matrix is frozen.
pub(crate) fn performer_backward(
    v: &Tensor,
    omega: &Tensor,
    cache: &PerformerCache,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let n = dout.rows();
    let mut dnum = dout.clone();
    let mut dden = Vec::with_capacity(n);
    for i in 0..n {
        let d = cache.den[i];
        let g: f64 = dout.row(i).iter().zip(cache.out.row(i)).map(|(a, b)| a * b).sum();
        dden.push(-g / d);
        dnum.row_mut(i).iter_mut().for_each(|x| *x /= d);
    }
    let dden = Tensor::new(vec![n, 1], dden)?;

    let mut dphi_q = dnum.matmul_nt(&cache.kv)?;
    let ksum_row = cache.ksum.clone().reshape(&[1, cache.ksum.len()])?;
    dphi_q.add_assign(&dden.matmul(&ksum_row)?)?;

    let dkv = cache.phi_q.matmul_tn(&dnum)?;
    let dksum = cache.phi_q.matmul_tn(&dden)?; // m × 1
    let mut dphi_k = v.matmul_nt(&dkv)?;
    let dksum_row = dksum.reshape(&[1, cache.ksum.len()])?;
    for i in 0..dphi_k.rows() {
        dphi_k.row_mut(i)
            .iter_mut()
            .zip(dksum_row.data())
            .for_each(|(a, b)| *a += b);
    }
    let dv = cache.phi_k.matmul(&dkv)?;

    let dq = features_backward(&cache.qs, omega, &cache.phi_q, &dphi_q)?.scale(cache.scale);
    let dk = features_backward(&cache.ks, omega, &cache.phi_k, &dphi_k)?.scale(cache.scale);
    Ok((dq, dk, dv))
}
