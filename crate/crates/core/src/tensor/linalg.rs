use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};
use crate::exec::Exec;

use super::Tensor;

/// Row-major `f64` matrix used for model arithmetic and the Hessian solves.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    /// Widens a rank-2 tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [r, c] => Ok(Mat {
                rows: *r,
                cols: *c,
                data: t.data().iter().map(|&v| v as f64).collect(),
            }),
            s => Err(Error::shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    /// Narrows to an FP32 tensor.
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(
            vec![self.rows, self.cols],
            self.data.iter().map(|&v| v as f32).collect(),
        )
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// Copies the sub-matrix `rows x cols`.
    pub fn slice(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Mat {
        let (r0, c0) = (rows.start, cols.start);
        Mat::from_fn(rows.len(), cols.len(), |r, c| self[(r0 + r, c0 + c)])
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        self.matmul_with(other, Exec::default())
    }

    /// `self · other`, summing over the inner dimension in index order.
    pub fn matmul_with(&self, other: &Mat, exec: Exec) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::shape(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let n = other.cols;
        let mut out = vec![0.0; self.rows * n];
        if n > 0 {
            exec.for_each_chunk(&mut out, n, |i, row| {
                for (p, &av) in self.row(i).iter().enumerate() {
                    let brow = &other.data[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            });
        }
        Ok(Mat {
            rows: self.rows,
            cols: n,
            data: out,
        })
    }

    /// `self · otherᵀ`: every output entry is a dot product of two rows.
    pub fn matmul_nt_with(&self, other: &Mat, exec: Exec) -> Result<Mat> {
        if self.cols != other.cols {
            return Err(Error::shape(format!(
                "matmul {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let n = other.rows;
        let mut out = vec![0.0; self.rows * n];
        if n > 0 {
            exec.for_each_chunk(&mut out, n, |i, row| {
                let a = self.row(i);
                for (j, o) in row.iter_mut().enumerate() {
                    *o = dot(a, other.row(j));
                }
            });
        }
        Ok(Mat {
            rows: self.rows,
            cols: n,
            data: out,
        })
    }

    pub fn matmul_nt(&self, other: &Mat) -> Result<Mat> {
        self.matmul_nt_with(other, Exec::default())
    }

    pub fn add_diag(&mut self, v: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += v;
        }
    }

    fn require_square(&self, what: &str) -> Result<usize> {
        if self.rows != self.cols {
            return Err(Error::shape(format!(
                "{what} needs a square matrix, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(self.rows)
    }

    /// Lower-triangular `L` with `self = L·Lᵀ`.
    pub fn cholesky_lower(&self) -> Result<Mat> {
        let n = self.require_square("cholesky")?;
        let mut l = Mat::zeros(n, n);
        for j in 0..n {
            let mut d = self[(j, j)];
            for p in 0..j {
                d -= l[(j, p)] * l[(j, p)];
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::Numeric {
                    column: j,
                    msg: format!("matrix is not positive definite (pivot {d:e})"),
                });
            }
            let d = d.sqrt();
            l[(j, j)] = d;
            for i in j + 1..n {
                let mut s = self[(i, j)];
                for p in 0..j {
                    s -= l[(i, p)] * l[(j, p)];
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(l)
    }

    /// Inverse of a lower-triangular matrix by forward substitution.
    pub fn lower_triangular_inverse(&self) -> Result<Mat> {
        let n = self.require_square("triangular inverse")?;
        let mut inv = Mat::zeros(n, n);
        for c in 0..n {
            for i in c..n {
                let mut s = if i == c { 1.0 } else { 0.0 };
                for p in c..i {
                    s -= self[(i, p)] * inv[(p, c)];
                }
                let d = self[(i, i)];
                if d == 0.0 {
                    return Err(Error::Numeric {
                        column: i,
                        msg: "zero on triangular diagonal".into(),
                    });
                }
                inv[(i, c)] = s / d;
            }
        }
        Ok(inv)
    }

    /// Inverse of an upper-triangular matrix by back substitution.
    pub fn upper_triangular_inverse(&self) -> Result<Mat> {
        Ok(self.transpose().lower_triangular_inverse()?.transpose())
    }

    /// Inverse of a symmetric positive-definite matrix through its Cholesky factor.
    pub fn spd_inverse(&self) -> Result<Mat> {
        let linv = self.cholesky_lower()?.lower_triangular_inverse()?;
        // A⁻¹ = L⁻ᵀ L⁻¹
        let n = self.rows;
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut s = 0.0;
                for p in i..n {
                    s += linv[(p, i)] * linv[(p, j)];
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        Ok(out)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |s, (x, y)| s + x * y)
}
