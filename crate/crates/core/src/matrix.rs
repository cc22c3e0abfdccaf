//! Row-major `f32` matrices and the `f64`-accumulating kernels used on them.

use crate::error::{Error, Result};

/// Owned row-major matrix of `f32`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseMatrix {
    data: Vec<f32>,
    rows: usize,
    cols: usize,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    /// An empty matrix with a fixed row width.
    pub fn empty(cols: usize) -> Self {
        DenseMatrix {
            data: Vec::new(),
            rows: 0,
            cols,
        }
    }

    pub fn from_vec(data: Vec<f32>, rows: usize, cols: usize) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Validation(format!(
                "matrix buffer holds {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(DenseMatrix { data, rows, cols })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(DenseMatrix {
            data,
            rows: rows.len(),
            cols,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn push_row(&mut self, row: &[f32]) {
        assert_eq!(row.len(), self.cols, "row width");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// Keeps the first `n` rows.
    pub fn truncate(&mut self, n: usize) {
        if n < self.rows {
            self.rows = n;
            self.data.truncate(n * self.cols);
        }
    }

    /// Keeps the rows whose index satisfies `keep`, preserving order.
    pub fn retain_rows(&mut self, mut keep: impl FnMut(usize) -> bool) {
        let cols = self.cols;
        let mut w = 0;
        for r in 0..self.rows {
            if keep(r) {
                if w != r {
                    self.data.copy_within(r * cols..(r + 1) * cols, w * cols);
                }
                w += 1;
            }
        }
        self.rows = w;
        self.data.truncate(w * cols);
    }

    pub fn view(&self) -> MatrixView<'_> {
        MatrixView {
            data: &self.data,
            rows: self.rows,
            cols: self.cols,
        }
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.view().iter_rows()
    }
}

/// Borrowed row-major matrix.
#[derive(Debug, Clone, Copy)]
pub struct MatrixView<'a> {
    data: &'a [f32],
    rows: usize,
    cols: usize,
}

impl<'a> MatrixView<'a> {
    pub fn new(data: &'a [f32], cols: usize) -> Result<Self> {
        if cols == 0 {
            if !data.is_empty() {
                return Err(Error::Validation("zero-width matrix with data".into()));
            }
            return Ok(MatrixView { data, rows: 0, cols });
        }
        if !data.len().is_multiple_of(cols) {
            return Err(Error::Validation(format!(
                "buffer of {} values is not a multiple of row width {cols}",
                data.len()
            )));
        }
        Ok(MatrixView {
            data,
            rows: data.len() / cols,
            cols,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &'a [f32] {
        self.data
    }

    pub fn row(&self, i: usize) -> &'a [f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &'a [f32]> + 'a {
        let cols = self.cols.max(1);
        let rows = self.rows;
        self.data.chunks_exact(cols).take(rows)
    }

    pub fn to_owned(&self) -> DenseMatrix {
        DenseMatrix {
            data: self.data.to_vec(),
            rows: self.rows,
            cols: self.cols,
        }
    }
}

/// Dot product of two `f32` slices accumulated in `f64`.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (ca, ra) = a.split_at(a.len() & !3);
    let (cb, rb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(4).zip(cb.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += f64::from(x[k]) * f64::from(y[k]);
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += f64::from(*x) * f64::from(*y);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let (ca, ra) = a.split_at(a.len() & !7);
    let (cb, rb) = b.split_at(ca.len());
    for (x, y) in ca.chunks_exact(8).zip(cb.chunks_exact(8)) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

pub fn squared_norm(a: &[f32]) -> f64 {
    dot(a, a)
}

/// Returns `a / ||a||` in `f32`, or `None` when the norm is below `min_norm`.
pub fn normalized(a: &[f32], min_norm: f64) -> Option<Vec<f32>> {
    let norm = squared_norm(a).sqrt();
    if !(norm >= min_norm) || norm == 0.0 {
        return None;
    }
    Some(a.iter().map(|&v| (f64::from(v) / norm) as f32).collect())
}

/// Index of the first non-finite row, if any.
pub fn first_non_finite_row(m: MatrixView<'_>) -> Option<usize> {
    m.iter_rows().position(|r| r.iter().any(|v| !v.is_finite()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive_loop() {
        let a: Vec<f32> = (0..13).map(|i| i as f32 * 0.37 - 2.0).collect();
        let b: Vec<f32> = (0..13).map(|i| (i as f32).sin()).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
        let a64: Vec<f64> = a.iter().map(|&x| x as f64).collect();
        let b64: Vec<f64> = b.iter().map(|&x| x as f64).collect();
        assert!((dot_f64(&a64, &b64) - naive).abs() < 1e-12);
    }

    #[test]
    fn retain_rows_keeps_order() {
        let mut m = DenseMatrix::from_rows(&[[1.0f32, 1.0], [2.0, 2.0], [3.0, 3.0]]).unwrap();
        m.retain_rows(|r| r != 1);
        assert_eq!(m.rows(), 2);
        assert_eq!(m.row(1), &[3.0, 3.0]);
    }

    #[test]
    fn normalize_rejects_zero() {
        assert!(normalized(&[0.0, 0.0], 1e-8).is_none());
        let n = normalized(&[3.0, 4.0], 1e-8).unwrap();
        assert!((squared_norm(&n) - 1.0).abs() < 1e-6);
    }
}
