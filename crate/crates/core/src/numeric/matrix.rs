//! Dense row-major matrices for frozen layer and adapter weights.

use crate::error::{Error, Result};
use crate::numeric::vector::FeatureVector;

/// A `rows x cols` real matrix, row-major, all entries finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl LinearMap {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Invalid("matrix dimensions must be positive".into()));
        }
        if values.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "matrix payload holds {} values, expected {}x{} = {}",
                values.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "matrix entries".into(),
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Standard matrix-vector product; output dim = rows.
    pub fn matvec(&self, v: &FeatureVector) -> Result<FeatureVector> {
        if v.dim() != self.cols {
            return Err(Error::DimMismatch {
                expected: self.cols,
                actual: v.dim(),
            });
        }
        let mut out = vec![0.0; self.rows];
        self.matvec_slice(v.values(), &mut out);
        Ok(FeatureVector::from_raw(out))
    }

    pub(crate) fn matvec_slice(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.values[r * self.cols..(r + 1) * self.cols];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    /// out = self^T x
    pub(crate) fn matvec_t_slice(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.fill(0.0);
        for (r, xr) in x.iter().enumerate() {
            let row = &self.values[r * self.cols..(r + 1) * self.cols];
            for (o, a) in out.iter_mut().zip(row) {
                *o += xr * a;
            }
        }
    }

    /// self += scale * a b^T  (a has rows entries, b has cols entries).
    pub(crate) fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, ar) in a.iter().enumerate() {
            let row = &mut self.values[r * self.cols..(r + 1) * self.cols];
            let f = scale * ar;
            for (v, bc) in row.iter_mut().zip(b) {
                *v += f * bc;
            }
        }
    }

    /// self += a * other (shapes must match).
    pub(crate) fn axpy(&mut self, a: f64, other: &LinearMap) {
        debug_assert_eq!(self.rows, other.rows);
        debug_assert_eq!(self.cols, other.cols);
        for (v, o) in self.values.iter_mut().zip(&other.values) {
            *v += a * o;
        }
    }

    pub(crate) fn scale(&mut self, a: f64) {
        for v in self.values.iter_mut() {
            *v *= a;
        }
    }
}
