use std::fmt;

use super::gemm::{gemm_nn, gemm_tn};
use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
///
/// Vectors are represented as `1×n` tensors (or `B×n` when batched).
#[derive(Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor2D {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor2D({}x{}) ", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list()
                .entries((0..self.rows).map(|r| self.row(r)))
                .finish()
        } else {
            write!(f, "[..]")
        }
    }
}

impl Tensor2D {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Tensor2D::new",
                format!("{} values for {rows}x{cols}", rows * cols),
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a tensor from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("Tensor2D::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A `1×n` row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Contiguous block of rows `[start, end)`.
    #[inline]
    pub fn rows_slice(&self, start: usize, end: usize) -> &[f64] {
        &self.data[start * self.cols..end * self.cols]
    }

    #[inline]
    pub fn rows_slice_mut(&mut self, start: usize, end: usize) -> &mut [f64] {
        &mut self.data[start * self.cols..end * self.cols]
    }

    fn check_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("rhs with {} rows", self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        gemm_nn(
            self.rows,
            other.cols,
            self.cols,
            &self.data,
            self.cols,
            &other.data,
            other.cols,
            &mut out.data,
            other.cols,
            false,
        );
        Ok(out)
    }

    /// Matrix product `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "matmul_tn",
                format!("rhs with {} rows", self.rows),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        gemm_tn(
            self.cols,
            other.cols,
            self.rows,
            &self.data,
            self.cols,
            &other.data,
            other.cols,
            &mut out.data,
            other.cols,
            false,
        );
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other, op)?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.axpy(1.0, other)
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    /// Adds a `1×cols` bias to every row.
    pub fn add_row_broadcast(&mut self, bias: &Self) -> Result<()> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::shape(
                "add_row_broadcast",
                format!("1x{}", self.cols),
                format!("{}x{}", bias.rows, bias.cols),
            ));
        }
        for r in 0..self.rows {
            for (a, &b) in self.row_mut(r).iter_mut().zip(&bias.data) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Sums over rows, giving a `1×cols` tensor.
    pub fn column_sums(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for r in 0..self.rows {
            for (a, &b) in out.data.iter_mut().zip(self.row(r)) {
                *a += b;
            }
        }
        out
    }

    /// Horizontal concatenation of tensors with equal row counts.
    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(Error::shape("concat_cols", rows, bad.rows));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self { rows, cols, data })
    }

    /// Columns `[start, end)` as a new tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.cols {
            return Err(Error::shape(
                "slice_cols",
                format!("range within 0..{}", self.cols),
                format!("{start}..{end}"),
            ));
        }
        let mut data = Vec::with_capacity(self.rows * (end - start));
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..end]);
        }
        Ok(Self {
            rows: self.rows,
            cols: end - start,
            data,
        })
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid_scalar)
    }

    pub fn tanh(&self) -> Self {
        self.map(f64::tanh)
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Self {
        let mut out = self.clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place softmax of one row.
#[inline]
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn matmul(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    a.matmul(b)
}

pub fn sigmoid(x: &Tensor2D) -> Tensor2D {
    x.sigmoid()
}

pub fn tanh(x: &Tensor2D) -> Tensor2D {
    x.tanh()
}

pub fn hadamard(a: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    a.hadamard(b)
}

pub fn softmax_rows(x: &Tensor2D) -> Tensor2D {
    x.softmax_rows()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use proptest::prelude::*;

    fn naive_matmul(a: &Tensor2D, b: &Tensor2D) -> Tensor2D {
        let mut out = Tensor2D::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for p in 0..a.cols() {
                    acc += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn random(rng: &mut SeededRng, r: usize, c: usize) -> Tensor2D {
        let data = (0..r * c).map(|_| rng.uniform(-2.0, 2.0)).collect();
        Tensor2D::new(r, c, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let id = Tensor2D::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let v = Tensor2D::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(id.matmul(&v).unwrap(), v);

        let a = Tensor2D::from_rows(&[[1.0, 2.0]]).unwrap();
        assert_eq!(a.matmul(&v).unwrap().as_slice(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = SeededRng::new(7);
        let a = random(&mut rng, 5, 4);
        let b = random(&mut rng, 4, 3);
        let got = a.matmul(&b).unwrap();
        assert!(got.max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
    }

    #[test]
    fn matmul_exhaustive_small_shapes() {
        let mut rng = SeededRng::new(11);
        for m in 1..=6 {
            for k in 1..=6 {
                for n in 1..=6 {
                    let a = random(&mut rng, m, k);
                    let b = random(&mut rng, k, n);
                    let got = a.matmul(&b).unwrap();
                    assert!(got.max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
                    let tn = a.transpose().matmul_tn(&b).unwrap();
                    assert!(tn.max_abs_diff(&got) <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_shape_error() {
        let a = Tensor2D::zeros(2, 3);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert_eq!(Tensor2D::zeros(1, 1).tanh().get(0, 0), 0.0);
        let h = Tensor2D::row_vector(&[2.0, 3.0])
            .hadamard(&Tensor2D::row_vector(&[4.0, 5.0]))
            .unwrap();
        assert_eq!(h.as_slice(), &[8.0, 15.0]);
        assert!(Tensor2D::zeros(1, 2).hadamard(&Tensor2D::zeros(2, 1)).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = Tensor2D::row_vector(&[0.0, 0.0]).softmax_rows();
        assert_eq!(s.as_slice(), &[0.5, 0.5]);
        let s = Tensor2D::row_vector(&[1000.0, 1000.0]).softmax_rows();
        assert_eq!(s.as_slice(), &[0.5, 0.5]);

        let x = [1.0f64, 2.0, 3.0];
        let z: f64 = x.iter().map(|v| v.exp()).sum();
        let s = Tensor2D::row_vector(&x).softmax_rows();
        for (got, v) in s.as_slice().iter().zip(x) {
            assert!((got - v.exp() / z).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(row in prop::collection::vec(-50.0f64..50.0, 1..8), c in -100.0f64..100.0) {
            let x = Tensor2D::row_vector(&row);
            let shifted = x.map(|v| v + c);
            let a = x.softmax_rows();
            let b = shifted.softmax_rows();
            prop_assert!(a.max_abs_diff(&b) <= 1e-12);
            prop_assert!((a.sum() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn sigmoid_symmetry(x in -40.0f64..40.0) {
            prop_assert!((sigmoid_scalar(x) + sigmoid_scalar(-x) - 1.0).abs() <= 1e-15);
        }
    }
}
