//! Minimal dense tensor substrate.
//!
//! Everything in the model is a row-major `f64` array with an explicit shape.
//! Most operations are 2-D (`rows × cols`); higher ranks exist only as storage
//! (checkpoints, images).

mod gradcheck;
mod ops;
mod rng;

pub use gradcheck::{grad_check, GradReport, FD_STEP};
pub use ops::{
    gelu, gelu_backward, layer_norm, layer_norm_backward, norm_and_activation, softmax_rows,
    softmax_rows_backward, LayerNormCache, NormKind,
};
pub use rng::Rng;

use crate::error::{dim_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(dim_err("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
        }
    }

    /// Entries drawn i.i.d. from `N(0, std²)`.
    pub fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Entries drawn i.i.d. from `U(-bound, bound)`.
    pub fn rand_uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| (2.0 * rng.uniform() - 1.0) * bound)
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Leading extent for a matrix (1 for vectors).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Trailing extent.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(dim_err(format!(
                "cannot reshape {:?} to {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn expect_matrix(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(dim_err(format!(
                "{what}: expected a matrix, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    fn expect_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// `A · B`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_matrix("matmul lhs")?;
        let (k2, p) = other.expect_matrix("matmul rhs")?;
        if k != k2 {
            return Err(dim_err(format!(
                "matmul: {:?} × {:?} inner extents disagree",
                self.shape, other.shape
            )));
        }
        let mut out = Tensor::zeros(&[m, p]);
        gemm(m, k, p, &self.data, (k, 1), &other.data, (p, 1), &mut out.data);
        Ok(out)
    }

    /// `A · Bᵀ`.
    pub fn matmul_nt(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_matrix("matmul_nt lhs")?;
        let (p, k2) = other.expect_matrix("matmul_nt rhs")?;
        if k != k2 {
            return Err(dim_err(format!(
                "matmul_nt: {:?} × {:?}ᵀ inner extents disagree",
                self.shape, other.shape
            )));
        }
        let mut out = Tensor::zeros(&[m, p]);
        gemm(m, k, p, &self.data, (k, 1), &other.data, (1, k), &mut out.data);
        Ok(out)
    }

    /// `Aᵀ · B`.
    pub fn matmul_tn(&self, other: &Tensor) -> Result<Tensor> {
        let (k, m) = self.expect_matrix("matmul_tn lhs")?;
        let (k2, p) = other.expect_matrix("matmul_tn rhs")?;
        if k != k2 {
            return Err(dim_err(format!(
                "matmul_tn: {:?}ᵀ × {:?} inner extents disagree",
                self.shape, other.shape
            )));
        }
        let mut out = Tensor::zeros(&[m, p]);
        gemm(m, k, p, &self.data, (1, m), &other.data, (p, 1), &mut out.data);
        Ok(out)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.expect_matrix("transpose")?;
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_same_shape(other, "mul")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Adds `v` (length `cols`) to every row.
    pub fn add_row_vector(&mut self, v: &Tensor) -> Result<()> {
        let c = self.cols();
        if v.len() != c {
            return Err(dim_err(format!(
                "row vector of length {} added to {:?}",
                v.len(),
                self.shape
            )));
        }
        for row in self.data.chunks_mut(c) {
            for (a, b) in row.iter_mut().zip(&v.data) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Column sums of a matrix, as a vector of length `cols`.
    pub fn sum_rows(&self) -> Tensor {
        let c = self.cols();
        let mut out = vec![0.0; c];
        for row in self.data.chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Tensor {
            shape: vec![c],
            data: out,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Copies the given rows, in order, into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            shape: vec![idx.len(), c],
            data,
        }
    }

    /// Columns `[start, end)` of a matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Tensor {
        let c = self.cols();
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows() * w);
        for row in self.data.chunks(c) {
            data.extend_from_slice(&row[start..end]);
        }
        Tensor {
            shape: vec![self.rows(), w],
            data,
        }
    }

    /// Writes `block` into columns starting at `start`.
    pub fn set_cols(&mut self, start: usize, block: &Tensor) {
        let c = self.cols();
        let w = block.cols();
        for (dst, src) in self.data.chunks_mut(c).zip(block.data.chunks(w)) {
            dst[start..start + w].copy_from_slice(src);
        }
    }
}

/// `C[m×p] = A[m×k] · B[k×p]` with arbitrary row/column strides on A and B.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    p: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || p == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: extents and strides describe slices that were validated by the
    // callers against the owning tensors' shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            p,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Error-free transformation oracle: TwoProduct via fma plus Neumaier summation.
    fn compensated_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.rows(), a.cols());
        let p = b.cols();
        Tensor::from_fn(m, p, |i, j| {
            let mut sum = 0.0f64;
            let mut comp = 0.0f64;
            for t in 0..k {
                let x = a.get(i, t);
                let y = b.get(t, j);
                let prod = x * y;
                let err = x.mul_add(y, -prod);
                for term in [prod, err] {
                    let s = sum + term;
                    if sum.abs() >= term.abs() {
                        comp += (sum - s) + term;
                    } else {
                        comp += (term - s) + sum;
                    }
                    sum = s;
                }
            }
            sum + comp
        })
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(a.matmul(&Tensor::eye(2)).unwrap(), a);
    }

    #[test]
    fn matmul_column() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_matches_compensated_oracle() {
        let mut rng = Rng::new(11);
        let a = Tensor::randn(&[8, 8], 1.0, &mut rng);
        let b = Tensor::randn(&[8, 8], 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        let oracle = compensated_matmul(&a, &b);
        for (x, y) in c.data().iter().zip(oracle.data()) {
            let scale = y.abs().max(1e-300);
            assert!((x - y).abs() / scale <= 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn transposed_variants_agree() {
        let mut rng = Rng::new(3);
        let a = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::randn(&[6, 7], 1.0, &mut rng);
        let nt = a.matmul_nt(&b).unwrap();
        let direct = a.matmul(&b.transpose().unwrap()).unwrap();
        assert!(nt.max_abs_diff(&direct) < 1e-13);

        let c = Tensor::randn(&[5, 4], 1.0, &mut rng);
        let tn = a.matmul_tn(&c).unwrap();
        let direct = a.transpose().unwrap().matmul(&c).unwrap();
        assert!(tn.max_abs_diff(&direct) < 1e-13);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
