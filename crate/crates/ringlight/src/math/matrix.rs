//! Dense row-major f64 matrices and exact matrix arithmetic.

use crate::math::rng::SeedContext;
use crate::{Error, Result};

/// Row-major dense matrix of 64-bit reals. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Build from row-major data, validating length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {bad} = {}", data[bad])));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// Entries i.i.d. normal from the context's stream.
    pub fn random_normal(ctx: &SeedContext, rows: usize, cols: usize, mean: f64, std: f64) -> Self {
        let s = ctx.stream();
        let data = (0..rows * cols).map(|i| s.normal_at(i as u64, mean, std)).collect();
        Self { rows, cols, data }
    }

    /// Entries i.i.d. uniform in [lo, hi).
    pub fn random_uniform(ctx: &SeedContext, rows: usize, cols: usize, lo: f64, hi: f64) -> Self {
        let s = ctx.stream();
        let data = (0..rows * cols).map(|i| lo + (hi - lo) * s.uniform_at(i as u64)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * c).collect() }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Exact IEEE-754 double product, accumulating over k per output element.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} . {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.data[i * a.cols + k] * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

/// Relative Frobenius distance `|a - b|_F / max(|b|_F, floor)`.
pub fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let diff = a.sub(b).expect("shape checked by caller");
    diff.frobenius_norm() / b.frobenius_norm().max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: transposes b and forms explicit row-column dot
    /// products, accumulating in the same k order as `matmul`.
    fn matmul_oracle(a: &Matrix, b: &Matrix) -> Matrix {
        let bt = b.transpose();
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            a.row(i).iter().zip(bt.row(j)).map(|(x, y)| x * y).fold(0.0, |acc, t| acc + t)
        })
    }

    #[test]
    fn identity_left_multiplication() {
        let m = Matrix::from_vec(3, 2, vec![1.0, -2.0, 0.5, 4.0, 9.0, -7.0]).unwrap();
        let i3 = Matrix::identity(3);
        assert_eq!(matmul(&i3, &m).unwrap(), m);
    }

    #[test]
    fn hand_arithmetic_case() {
        let a = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Matrix::from_vec(2, 1, vec![0.0, 1.0]).unwrap();
        let y = matmul(&a, &b).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0]);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matches_independent_oracle_to_zero_ulp() {
        let ctx = SeedContext::new(11);
        let a = Matrix::random_uniform(&ctx.child("a", 0), 7, 5, -1.0, 1.0);
        let b = Matrix::random_uniform(&ctx.child("b", 0), 5, 3, -1.0, 1.0);
        let y = matmul(&a, &b).unwrap();
        let z = matmul_oracle(&a, &b);
        assert_eq!(y.data(), z.data());
    }

    #[test]
    fn oracle_agreement_on_100_random_shapes() {
        let ctx = SeedContext::new(5);
        let dims = ctx.child("dims", 0).stream();
        for t in 0..100u64 {
            let m = 1 + dims.index_at(3 * t, 16) as usize;
            let k = 1 + dims.index_at(3 * t + 1, 16) as usize;
            let n = 1 + dims.index_at(3 * t + 2, 16) as usize;
            let a = Matrix::random_uniform(&ctx.child("a", t), m, k, -2.0, 2.0);
            let b = Matrix::random_uniform(&ctx.child("b", t), k, n, -2.0, 2.0);
            assert_eq!(matmul(&a, &b).unwrap().data(), matmul_oracle(&a, &b).data());
        }
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![f64::INFINITY, 0.0]).is_err());
    }
}
