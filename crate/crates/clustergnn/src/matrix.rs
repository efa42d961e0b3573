//! Dense row-major matrices and the numeric kernels shared by every module.
//!
//! Model math runs in `f32` by default; reductions (softmax denominators, dot
//! products) accumulate in `f64`. The same code instantiates at `f64` for
//! extended-precision oracles.

use crate::error::{Error, Result};

/// Scalar type a [`Matrix`] can hold. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float + Default + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn from64(v: f64) -> Self;
    fn into64(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn into64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn into64(self) -> f64 {
        self
    }
}

/// Sentinel substituted for masked attention scores before the stabilized
/// softmax. Large enough that `exp` underflows to exactly zero.
pub const MASK_SENTINEL: f64 = -1e9;

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix<S = f32> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: std::fmt::Debug> std::fmt::Debug for Matrix<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Matrix<{}x{}>", self.rows, self.cols)?;
        if self.rows * self.cols <= 64 {
            for i in 0..self.rows {
                write!(f, "\n  {:?}", &self.data[i * self.cols..(i + 1) * self.cols])?;
            }
        }
        Ok(())
    }
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: S) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn scalar(v: S) -> Self {
        Matrix::from_vec(1, 1, vec![v])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> S {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut S {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn item(&self) -> S {
        assert_eq!((self.rows, self.cols), (1, 1), "item() on non-scalar matrix");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                *out.at_mut(j, i) = self.at(i, j);
            }
        }
        out
    }

    pub fn add(&self, rhs: &Self) -> Self {
        assert_eq!(self.shape(), rhs.shape(), "add: shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        assert_eq!(self.shape(), rhs.shape(), "sub: shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| a - b)
            .collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn add_assign(&mut self, rhs: &Self) {
        assert_eq!(self.shape(), rhs.shape(), "add_assign: shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a = *a + b;
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| S::from64(x.into64() * c))
    }

    pub fn hadamard(&self, rhs: &Self) -> Self {
        assert_eq!(self.shape(), rhs.shape(), "hadamard: shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| a * b)
            .collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    /// `self (m×k) · rhs (k×n)`, accumulating each output entry in f64.
    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul: inner dims {} vs {}",
            self.cols, rhs.rows
        );
        let (m, n) = (self.rows, rhs.cols);
        let mut out = Matrix::zeros(m, n);
        let mut acc = vec![0f64; n];
        for i in 0..m {
            for a in acc.iter_mut() {
                *a = 0.0;
            }
            let arow = self.row(i);
            for (kk, &aik) in arow.iter().enumerate() {
                let av = aik.into64();
                if av == 0.0 {
                    continue;
                }
                let brow = rhs.row(kk);
                for (a, &b) in acc.iter_mut().zip(brow) {
                    *a += av * b.into64();
                }
            }
            let orow = out.row_mut(i);
            for (o, &a) in orow.iter_mut().zip(acc.iter()) {
                *o = S::from64(a);
            }
        }
        out
    }

    /// `self (m×k) · rhsᵀ (k×n)` where `rhs` is n×k. Both operands stream rows.
    pub fn matmul_nt(&self, rhs: &Self) -> Self {
        assert_eq!(
            self.cols, rhs.cols,
            "matmul_nt: inner dims {} vs {}",
            self.cols, rhs.cols
        );
        let (m, n) = (self.rows, rhs.rows);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let arow = self.row(i);
            let orow = out.row_mut(i);
            for j in 0..n {
                orow[j] = S::from64(dot64(arow, rhs.row(j)));
            }
        }
        out
    }

    /// `selfᵀ (k×m) · rhs (m×n)` where `self` is m×k.
    pub fn matmul_tn(&self, rhs: &Self) -> Self {
        assert_eq!(
            self.rows, rhs.rows,
            "matmul_tn: inner dims {} vs {}",
            self.rows, rhs.rows
        );
        let (k, n) = (self.cols, rhs.cols);
        let mut acc = vec![0f64; k * n];
        for i in 0..self.rows {
            let arow = self.row(i);
            let brow = rhs.row(i);
            for (p, &a) in arow.iter().enumerate() {
                let av = a.into64();
                if av == 0.0 {
                    continue;
                }
                let accrow = &mut acc[p * n..(p + 1) * n];
                for (o, &b) in accrow.iter_mut().zip(brow) {
                    *o += av * b.into64();
                }
            }
        }
        Matrix {
            rows: k,
            cols: n,
            data: acc.into_iter().map(S::from64).collect(),
        }
    }

    /// Vertical concatenation (rows of `parts`, in order).
    pub fn vcat(parts: &[&Self]) -> Self {
        assert!(!parts.is_empty());
        let cols = parts[0].cols;
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            assert_eq!(p.cols, cols, "vcat: column mismatch");
            data.extend_from_slice(&p.data);
        }
        Matrix { rows, cols, data }
    }

    /// Horizontal concatenation (columns of `parts`, in order).
    pub fn hcat(parts: &[&Self]) -> Self {
        assert!(!parts.is_empty());
        let rows = parts[0].rows;
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let orow = out.row_mut(i);
            let mut off = 0;
            for p in parts {
                assert_eq!(p.rows, rows, "hcat: row mismatch");
                orow[off..off + p.cols].copy_from_slice(p.row(i));
                off += p.cols;
            }
        }
        out
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        assert!(start + len <= self.rows, "slice_rows out of range");
        Matrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Self {
        let mut out = Matrix::zeros(idx.len(), self.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.row(i));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|x| x.into64().abs())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, rhs: &Self) -> f64 {
        assert_eq!(self.shape(), rhs.shape(), "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(&a, &b)| (a.into64() - b.into64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x.into64().powi(2)).sum::<f64>().sqrt()
    }

    pub fn cast<T: Scalar>(&self) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| T::from64(x.into64())).collect(),
        }
    }
}

#[inline]
pub fn dot64<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += x.into64() * y.into64();
    }
    acc
}

/// Boolean mask with the same layout as a matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn filled(rows: usize, cols: usize, v: bool) -> Self {
        Mask {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mask { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Softmax over each row, optionally restricted to unmasked entries.
///
/// Masked entries are replaced by [`MASK_SENTINEL`] before the stabilized
/// (max-subtracted) softmax, which drives them to exactly zero in the output.
pub fn softmax_rows<S: Scalar>(m: &Matrix<S>, mask: Option<&Mask>) -> Result<Matrix<S>> {
    if m.is_empty() {
        return Err(Error::Empty("softmax_rows"));
    }
    if let Some(mk) = mask {
        if (mk.rows(), mk.cols()) != m.shape() {
            return Err(Error::Shape {
                op: "softmax_rows",
                expected: format!("{}x{}", m.rows(), m.cols()),
                got: format!("{}x{}", mk.rows(), mk.cols()),
            });
        }
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    let mut buf = vec![0f64; m.cols()];
    for i in 0..m.rows() {
        let row = m.row(i);
        let mrow = mask.map(|mk| mk.row(i));
        softmax_row_into(row, mrow, &mut buf).ok_or(Error::FullyMaskedRow { row: i })?;
        let orow = out.row_mut(i);
        for (o, &p) in orow.iter_mut().zip(buf.iter()) {
            *o = S::from64(p);
        }
    }
    Ok(out)
}

/// One stabilized softmax row in f64. Returns `None` if every entry is masked.
pub(crate) fn softmax_row_into<S: Scalar>(
    row: &[S],
    mask: Option<&[bool]>,
    out: &mut [f64],
) -> Option<()> {
    debug_assert_eq!(row.len(), out.len());
    if let Some(mk) = mask {
        if !mk.iter().any(|&b| b) {
            return None;
        }
    }
    let mut mx = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        let v = match mask {
            Some(mk) if !mk[j] => MASK_SENTINEL,
            _ => x.into64(),
        };
        out[j] = v;
        if v > mx {
            mx = v;
        }
    }
    let mut denom = 0f64;
    for o in out.iter_mut() {
        *o = (*o - mx).exp();
        denom += *o;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
    Some(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Log-softmax along the given axis; exp of each slice sums to 1.
pub fn log_softmax<S: Scalar>(m: &Matrix<S>, axis: Axis) -> Result<Matrix<S>> {
    if m.is_empty() {
        return Err(Error::Empty("log_softmax"));
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    match axis {
        Axis::Rows => {
            for i in 0..m.rows() {
                let row = m.row(i);
                let mx = row.iter().fold(f64::NEG_INFINITY, |a, &x| a.max(x.into64()));
                let lse = row
                    .iter()
                    .map(|&x| (x.into64() - mx).exp())
                    .sum::<f64>()
                    .ln();
                let orow = out.row_mut(i);
                for (o, &x) in orow.iter_mut().zip(row) {
                    *o = S::from64(x.into64() - mx - lse);
                }
            }
        }
        Axis::Cols => {
            for j in 0..m.cols() {
                let mut mx = f64::NEG_INFINITY;
                for i in 0..m.rows() {
                    mx = mx.max(m.at(i, j).into64());
                }
                let mut sum = 0f64;
                for i in 0..m.rows() {
                    sum += (m.at(i, j).into64() - mx).exp();
                }
                let lse = sum.ln();
                for i in 0..m.rows() {
                    *out.at_mut(i, j) = S::from64(m.at(i, j).into64() - mx - lse);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f32]]) -> Matrix<f32> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    #[test]
    fn softmax_uniform_input() {
        let out = softmax_rows(&mat(&[&[0.0, 0.0]]), None).unwrap();
        assert_eq!(out.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_analytic_quarters() {
        let m = mat(&[&[1f32.ln(), 3f32.ln()]]);
        let out = softmax_rows(&m, None).unwrap();
        assert!((out.at(0, 0) - 0.25).abs() < 1e-6);
        assert!((out.at(0, 1) - 0.75).abs() < 1e-6);
    }

    #[test]
    fn softmax_large_entries_no_overflow() {
        // Extended-precision oracle for the same row.
        let oracle = softmax_rows(&Matrix::<f64>::from_vec(1, 2, vec![1000.0, 1001.0]), None)
            .unwrap();
        let out = softmax_rows(&mat(&[&[1000.0, 1001.0]]), None).unwrap();
        assert!(out.all_finite());
        assert!((out.at(0, 0) as f64 - oracle.at(0, 0)).abs() < 1e-6);
        assert!((out.at(0, 1) as f64 - oracle.at(0, 1)).abs() < 1e-6);
        // sigma(-1), sigma(1)
        assert!((out.at(0, 0) - 0.2689).abs() < 1e-4);
        assert!((out.at(0, 1) - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn softmax_mask_zeroes_and_renormalizes() {
        let m = mat(&[&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]]);
        let mut mask = Mask::filled(2, 3, true);
        mask.set(0, 1, false);
        let out = softmax_rows(&m, Some(&mask)).unwrap();
        assert_eq!(out.at(0, 1), 0.0);
        let s: f32 = out.row(0).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        let unmasked = softmax_rows(&mat(&[&[1.0, 3.0]]), None).unwrap();
        assert!((out.at(0, 0) - unmasked.at(0, 0)).abs() < 1e-6);
        assert!((out.at(0, 2) - unmasked.at(0, 1)).abs() < 1e-6);
    }

    #[test]
    fn softmax_fully_masked_row_names_index() {
        let m = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let mut mask = Mask::filled(2, 2, true);
        mask.set(1, 0, false);
        mask.set(1, 1, false);
        match softmax_rows(&m, Some(&mask)) {
            Err(Error::FullyMaskedRow { row }) => assert_eq!(row, 1),
            other => panic!("expected FullyMaskedRow, got {other:?}"),
        }
    }

    #[test]
    fn softmax_deterministic() {
        let m = Matrix::<f32>::from_fn(7, 5, |i, j| ((i * 31 + j * 17) as f32).sin() * 100.0);
        let a = softmax_rows(&m, None).unwrap();
        let b = softmax_rows(&m, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn log_softmax_uniform() {
        let out = log_softmax(&mat(&[&[0.0, 0.0]]), Axis::Rows).unwrap();
        let expect = -(2f32.ln());
        assert!((out.at(0, 0) - expect).abs() < 1e-7);
        assert!((out.at(0, 1) - expect).abs() < 1e-7);
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let m = Matrix::<f32>::from_fn(5, 5, |i, j| ((i * 7 + j * 13) as f32).cos() * 3.0);
        let ls = log_softmax(&m, Axis::Rows).unwrap();
        let sm = softmax_rows(&m, None).unwrap();
        for i in 0..5 {
            let mut sum = 0f64;
            for j in 0..5 {
                assert!((ls.at(i, j).exp() - sm.at(i, j)).abs() < 1e-6);
                sum += ls.at(i, j).exp() as f64;
            }
            assert!((sum - 1.0).abs() < 1e-6);
            for j in 0..5 {
                assert!(ls.at(i, j) <= 1e-6);
            }
        }
    }

    #[test]
    fn log_softmax_cols_normalizes() {
        let m = Matrix::<f32>::from_fn(4, 3, |i, j| (i as f32) - 2.0 * (j as f32));
        let ls = log_softmax(&m, Axis::Cols).unwrap();
        for j in 0..3 {
            let sum: f64 = (0..4).map(|i| ls.at(i, j).exp() as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn log_softmax_empty_errors() {
        let m = Matrix::<f32>::zeros(0, 3);
        assert!(log_softmax(&m, Axis::Rows).is_err());
    }

    #[test]
    fn log_softmax_shift_invariance() {
        let m = Matrix::<f32>::from_fn(3, 4, |i, j| ((i + 2 * j) as f32).sin() * 5.0);
        let shifted = m.map(|x| x + 7.25);
        let a = log_softmax(&m, Axis::Rows).unwrap();
        let b = log_softmax(&shifted, Axis::Rows).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn matmul_small_known() {
        let a = mat(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = mat(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
        let cnt = a.matmul_nt(&b.transpose());
        assert_eq!(c, cnt);
        let ctn = a.transpose().matmul_tn(&b);
        assert_eq!(c, ctn);
    }

    #[test]
    fn gather_and_slice() {
        let m = Matrix::<f32>::from_fn(4, 2, |i, j| (i * 2 + j) as f32);
        let g = m.gather_rows(&[3, 0]);
        assert_eq!(g.row(0), m.row(3));
        assert_eq!(g.row(1), m.row(0));
        let s = m.slice_rows(1, 2);
        assert_eq!(s.row(0), m.row(1));
        assert_eq!(s.row(1), m.row(2));
    }
}
