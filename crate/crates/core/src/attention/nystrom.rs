//! Landmark (Nyström) attention with a Newton–Schulz pseudo-inverse.

use super::standard::check_qkv;
use crate::error::{param_err, Error, Result};
use crate::tensor::{softmax_rows, softmax_rows_backward, Tensor};

/// Segment boundaries: `m` contiguous runs of `⌊N/m⌋` rows, the remainder
/// appended to the last run.
fn segments(n: usize, m: usize) -> Vec<(usize, usize)> {
    let size = n / m;
    (0..m)
        .map(|j| {
            let start = j * size;
            let end = if j + 1 == m { n } else { start + size };
            (start, end)
        })
        .collect()
}

pub fn segment_mean_landmarks(x: &Tensor, m: usize) -> Result<Tensor> {
    let n = x.rows();
    if m == 0 || m > n {
        return Err(param_err(format!(
            "landmark count m = {m} must satisfy 1 ≤ m ≤ N = {n}"
        )));
    }
    let c = x.cols();
    let mut out = Tensor::zeros(&[m, c]);
    for (j, (s, e)) in segments(n, m).into_iter().enumerate() {
        let inv = 1.0 / (e - s) as f64;
        let dst = out.row_mut(j);
        for i in s..e {
            for (d, v) in dst.iter_mut().zip(x.row(i)) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    Ok(out)
}

fn landmarks_backward(dl: &Tensor, n: usize) -> Tensor {
    let m = dl.rows();
    let mut dx = Tensor::zeros(&[n, dl.cols()]);
    for (j, (s, e)) in segments(n, m).into_iter().enumerate() {
        let inv = 1.0 / (e - s) as f64;
        for i in s..e {
            for (d, g) in dx.row_mut(i).iter_mut().zip(dl.row(j)) {
                *d = g * inv;
            }
        }
    }
    dx
}

#[derive(Clone, Debug)]
struct PinvStep {
    z: Tensor,
    w: Tensor,
    t1: Tensor,
    t2: Tensor,
    t3: Tensor,
}

#[derive(Clone, Debug)]
pub(crate) struct PinvCache {
    a: Tensor,
    scale: f64,
    col_norm: (usize, f64),
    row_norm: (usize, f64),
    steps: Vec<PinvStep>,
}

/// `c·I − x` for square `x`.
fn shift_neg(c: f64, x: &Tensor) -> Tensor {
    let n = x.rows();
    let mut out = x.scale(-1.0);
    for i in 0..n {
        out.data_mut()[i * n + i] += c;
    }
    out
}

fn pinv_forward(a: &Tensor, iters: usize) -> Result<(Tensor, PinvCache)> {
    let m = a.rows();
    if a.rank() != 2 || a.cols() != m {
        return Err(param_err(format!(
            "pseudo-inverse needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    // ‖A‖₁ = max column abs-sum, ‖A‖_∞ = max row abs-sum.
    let mut col_norm = (0, f64::NEG_INFINITY);
    for j in 0..m {
        let s: f64 = (0..m).map(|i| a.get(i, j).abs()).sum();
        if s > col_norm.1 {
            col_norm = (j, s);
        }
    }
    let mut row_norm = (0, f64::NEG_INFINITY);
    for i in 0..m {
        let s: f64 = a.row(i).iter().map(|v| v.abs()).sum();
        if s > row_norm.1 {
            row_norm = (i, s);
        }
    }
    let scale = 1.0 / (col_norm.1 * row_norm.1);
    if !scale.is_finite() {
        return Err(Error::Numerical(
            "pseudo-inverse initialisation: zero or non-finite matrix norm".into(),
        ));
    }
    let mut z = a.transpose()?.scale(scale);
    let mut steps = Vec::with_capacity(iters);
    for it in 0..iters {
        let w = a.matmul(&z)?;
        let t1 = shift_neg(7.0, &w);
        let t2 = shift_neg(15.0, &w.matmul(&t1)?);
        let t3 = shift_neg(13.0, &w.matmul(&t2)?);
        let next = z.matmul(&t3)?.scale(0.25);
        if !next.is_finite() {
            return Err(Error::Numerical(format!(
                "pseudo-inverse iteration {it} produced a non-finite value"
            )));
        }
        steps.push(PinvStep { z, w, t1, t2, t3 });
        z = next;
    }
    Ok((
        z,
        PinvCache {
            a: a.clone(),
            scale,
            col_norm,
            row_norm,
            steps,
        },
    ))
}

/// Moore–Penrose pseudo-inverse approximation:
/// `Z₀ = Aᵀ/(‖A‖₁‖A‖_∞)`, then `Z ← ¼·Z(13I − AZ(15I − AZ(7I − AZ)))`.
pub fn iterative_pinv(a: &Tensor, iters: usize) -> Result<Tensor> {
    pinv_forward(a, iters).map(|(z, _)| z)
}

fn pinv_backward(cache: &PinvCache, dz_final: &Tensor) -> Result<Tensor> {
    let a = &cache.a;
    let m = a.rows();
    let mut da = Tensor::zeros(&[m, m]);
    let mut dz = dz_final.clone();
    for step in cache.steps.iter().rev() {
        let mut dz_prev = dz.matmul_nt(&step.t3)?.scale(0.25);
        let dt3 = step.z.matmul_tn(&dz)?.scale(0.25);
        let mut dw = dt3.matmul_nt(&step.t2)?.scale(-1.0);
        let dt2 = step.w.matmul_tn(&dt3)?.scale(-1.0);
        dw.axpy(-1.0, &dt2.matmul_nt(&step.t1)?)?;
        let dt1 = step.w.matmul_tn(&dt2)?.scale(-1.0);
        dw.axpy(-1.0, &dt1)?;
        da.add_assign(&dw.matmul_nt(&step.z)?)?;
        dz_prev.add_assign(&a.matmul_tn(&dw)?)?;
        dz = dz_prev;
    }
    // Z₀ = s·Aᵀ with s = 1/(n₁·n_∞).
    let s = cache.scale;
    da.axpy(s, &dz.transpose()?)?;
    let mut ds = 0.0;
    for i in 0..m {
        for j in 0..m {
            ds += dz.get(i, j) * a.get(j, i);
        }
    }
    let (cj, n1) = cache.col_norm;
    let (ri, ninf) = cache.row_norm;
    let dn1 = -ds * s / n1;
    let dninf = -ds * s / ninf;
    for i in 0..m {
        let g = dn1 * a.get(i, cj).signum();
        da.data_mut()[i * m + cj] += g;
    }
    for j in 0..m {
        let g = dninf * a.get(ri, j).signum();
        da.data_mut()[ri * m + j] += g;
    }
    Ok(da)
}

#[derive(Clone, Debug)]
pub(crate) struct NystromCache {
    m: usize,
    scale: f64,
    q_land: Tensor,
    k_land: Tensor,
    f1: Tensor,
    a: Tensor,
    f3: Tensor,
    z: Tensor,
    g: Tensor,
    h: Tensor,
    pinv: PinvCache,
}

/// `softmax(QK̃ᵀ/√d_h)·pinv(softmax(Q̃K̃ᵀ/√d_h))·softmax(Q̃Kᵀ/√d_h)·V`,
/// evaluated right to left so nothing larger than `N × m` is formed.
pub fn nystrom_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    m: usize,
    iters: usize,
) -> Result<Tensor> {
    nystrom_forward(q, k, v, m, iters).map(|(o, _)| o)
}

pub(crate) fn nystrom_forward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    m: usize,
    iters: usize,
) -> Result<(Tensor, NystromCache)> {
    let dh = check_qkv(q, k, v)?;
    if q.rows() != k.rows() {
        return Err(param_err("Nyström attention expects self-attention (equal Q/K lengths)"));
    }
    let scale = 1.0 / (dh as f64).sqrt();
    let q_land = segment_mean_landmarks(q, m)?;
    let k_land = segment_mean_landmarks(k, m)?;
    let f1 = softmax_rows(&q.matmul_nt(&k_land)?.scale(scale));
    let a = softmax_rows(&q_land.matmul_nt(&k_land)?.scale(scale));
    let f3 = softmax_rows(&q_land.matmul_nt(k)?.scale(scale));
    let (z, pinv) = pinv_forward(&a, iters)?;
    let g = f3.matmul(v)?;
    let h = z.matmul(&g)?;
    let out = f1.matmul(&h)?;
    Ok((
        out,
        NystromCache {
            m,
            scale,
            q_land,
            k_land,
            f1,
            a,
            f3,
            z,
            g,
            h,
            pinv,
        },
    ))
}

/// Returns `(dQ, dK, dV)`.
pub(crate) fn nystrom_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    c: &NystromCache,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let n = q.rows();
    let df1 = dout.matmul_nt(&c.h)?;
    let dh = c.f1.matmul_tn(dout)?;
    let dz = dh.matmul_nt(&c.g)?;
    let dg = c.z.matmul_tn(&dh)?;
    let df3 = dg.matmul_nt(v)?;
    let dv = c.f3.matmul_tn(&dg)?;
    let da = pinv_backward(&c.pinv, &dz)?;

    let ds1 = softmax_rows_backward(&c.f1, &df1).scale(c.scale); // N × m
    let ds2 = softmax_rows_backward(&c.a, &da).scale(c.scale); // m × m
    let ds3 = softmax_rows_backward(&c.f3, &df3).scale(c.scale); // m × N

    let mut dq = ds1.matmul(&c.k_land)?;
    let mut dq_land = ds2.matmul(&c.k_land)?;
    dq_land.add_assign(&ds3.matmul(k)?)?;
    let mut dk_land = ds1.matmul_tn(q)?;
    dk_land.add_assign(&ds2.matmul_tn(&c.q_land)?)?;
    let mut dk = ds3.matmul_tn(&c.q_land)?;

    debug_assert_eq!(dq_land.rows(), c.m);
    dq.add_assign(&landmarks_backward(&dq_land, n))?;
    dk.add_assign(&landmarks_backward(&dk_land, n))?;
    Ok((dq, dk, dv))
}
