use crate::error::{dim_err, param_err, Result};
use crate::tensor::{softmax_rows, softmax_rows_backward, Tensor};

pub(crate) fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<usize> {
    for (name, t) in [("Q", q), ("K", k), ("V", v)] {
        if t.rank() != 2 {
            return Err(dim_err(format!("{name} must be a matrix, got {:?}", t.shape())));
        }
    }
    let dh = q.cols();
    if dh == 0 {
        return Err(param_err("head dimension must be positive"));
    }
    if k.cols() != dh || k.rows() != v.rows() {
        return Err(dim_err(format!(
            "attention operands disagree: Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok(dh)
}

#[derive(Clone, Debug)]
pub(crate) struct StandardCache {
    probs: Tensor,
    scale: f64,
}

/// `softmax(Q·Kᵀ/√d_h)·V`.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    standard_forward(q, k, v).map(|(o, _)| o)
}

pub(crate) fn standard_forward(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, StandardCache)> {
    let dh = check_qkv(q, k, v)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let scores = q.matmul_nt(k)?.scale(scale);
    let probs = softmax_rows(&scores);
    let out = probs.matmul(v)?;
    Ok((out, StandardCache { probs, scale }))
}

/// Returns `(dQ, dK, dV)`.
pub(crate) fn standard_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cache: &StandardCache,
    dout: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let dv = cache.probs.matmul_tn(dout)?;
    let dprobs = dout.matmul_nt(v)?;
    let dscores = softmax_rows_backward(&cache.probs, &dprobs).scale(cache.scale);
    let dq = dscores.matmul(k)?;
    let dk = dscores.matmul_tn(q)?;
    Ok((dq, dk, dv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Rng};

    /// Dense oracle with explicit loops and Neumaier-compensated sums.
    fn dense_oracle(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        fn csum(xs: impl Iterator<Item = f64>) -> f64 {
            let (mut s, mut c) = (0.0f64, 0.0f64);
            for x in xs {
                let t = s + x;
                c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
                s = t;
            }
            s + c
        }
        let (n, dh) = (q.rows(), q.cols());
        let mut out = Tensor::zeros(&[n, v.cols()]);
        for i in 0..n {
            let scores: Vec<f64> = (0..k.rows())
                .map(|j| csum((0..dh).map(|t| q.get(i, t) * k.get(j, t))) / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z = csum(e.iter().copied());
            for c in 0..v.cols() {
                out.set(i, c, csum((0..k.rows()).map(|j| e[j] / z * v.get(j, c))));
            }
        }
        out
    }

    #[test]
    fn single_token_returns_value_row() {
        let q = Tensor::from_rows(&[vec![0.3, -1.2]]).unwrap();
        let k = Tensor::from_rows(&[vec![2.0, 0.5]]).unwrap();
        let v = Tensor::from_rows(&[vec![4.0, -7.0]]).unwrap();
        assert_eq!(scaled_dot_attention(&q, &k, &v).unwrap(), v);
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = Rng::new(3);
        let q = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let k = Tensor::from_fn(5, 4, |_, j| j as f64 * 0.1);
        let v = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        let mean = v.sum_rows().scale(1.0 / 5.0);
        for i in 0..5 {
            for j in 0..3 {
                assert!((out.get(i, j) - mean.data()[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_compensated_dense_oracle() {
        let mut rng = Rng::new(16);
        let q = Tensor::randn(&[16, 8], 1.0, &mut rng);
        let k = Tensor::randn(&[16, 8], 1.0, &mut rng);
        let v = Tensor::randn(&[16, 8], 1.0, &mut rng);
        let out = scaled_dot_attention(&q, &k, &v).unwrap();
        let oracle = dense_oracle(&q, &k, &v);
        let rel = out.sub(&oracle).unwrap().frobenius_norm() / oracle.frobenius_norm();
        assert!(rel <= 1e-10, "{rel}");
    }

    #[test]
    fn zero_head_dim_rejected() {
        let z = Tensor::zeros(&[3, 0]);
        assert!(scaled_dot_attention(&z, &z, &z).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(30);
        for seed in 0..5 {
            let q = Tensor::randn(&[5, 4], 1.0, &mut rng);
            let k = Tensor::randn(&[5, 4], 1.0, &mut rng);
            let v = Tensor::randn(&[5, 3], 1.0, &mut rng);
            let rep = grad_check(
                |xs| scaled_dot_attention(&xs[0], &xs[1], &xs[2]),
                |xs, dy| {
                    let (_, c) = standard_forward(&xs[0], &xs[1], &xs[2])?;
                    let (a, b, d) = standard_backward(&xs[0], &xs[1], &xs[2], &c, dy)?;
                    Ok(vec![a, b, d])
                },
                &[q, k, v],
                1e-4,
                seed,
            )
            .unwrap();
            assert!(rep.passed, "{rep:?}");
        }
    }
}
