use serde::{Deserialize, Serialize};

use crate::error::{CodaError, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(CodaError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Matrix) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · w + b` where `self` is `[n × in]`, `w` is `[in × out]`.
    pub fn affine(&self, w: &Matrix, b: &Matrix) -> Matrix {
        debug_assert_eq!(self.cols, w.rows);
        debug_assert_eq!(b.data.len(), w.cols);
        let mut out = Matrix::zeros(self.rows, w.cols);
        for r in 0..self.rows {
            let x = self.row(r);
            let o = out.row_mut(r);
            o.copy_from_slice(&b.data);
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let wrow = w.row(i);
                for (oj, &wij) in o.iter_mut().zip(wrow) {
                    *oj += xi * wij;
                }
            }
        }
        out
    }

    /// Accumulates `selfᵀ · upstream` into `dw` and column sums of `upstream` into `db`;
    /// returns `upstream · wᵀ`.
    pub fn affine_backward(
        &self,
        w: &Matrix,
        upstream: &Matrix,
        dw: &mut Matrix,
        db: &mut Matrix,
    ) -> Matrix {
        let mut dx = Matrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            let x = self.row(r);
            let g = upstream.row(r);
            for (bj, &gj) in db.data.iter_mut().zip(g) {
                *bj += gj;
            }
            for (i, &xi) in x.iter().enumerate() {
                let dwrow = dw.row_mut(i);
                for (d, &gj) in dwrow.iter_mut().zip(g) {
                    *d += xi * gj;
                }
            }
            let dxr = dx.row_mut(r);
            for (i, d) in dxr.iter_mut().enumerate() {
                let wrow = w.row(i);
                *d = wrow.iter().zip(g).map(|(a, b)| a * b).sum();
            }
        }
        dx
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_and_backward_shapes() {
        let x = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Matrix::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Matrix::from_vec(1, 2, vec![0.5, -0.5]).unwrap();
        let y = x.affine(&w, &b);
        assert_eq!(y.data, vec![4.5, 4.5, 10.5, 10.5]);

        let up = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut dw = w.zeros_like();
        let mut db = b.zeros_like();
        let dx = x.affine_backward(&w, &up, &mut dw, &mut db);
        assert_eq!(db.data, vec![1.0, 1.0]);
        assert_eq!(dw.data, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(dx.data, vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
    }
}
