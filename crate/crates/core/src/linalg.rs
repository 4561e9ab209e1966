//! Small dense helpers shared by the solvers and the simulator.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Condition-number ceiling above which a gain operator counts as singular.
pub const CONDITION_LIMIT: f64 = 1e12;

pub fn max_norm(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn symmetric_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_sym_eigenvalue(m: &DMatrix<f64>) -> f64 {
    sym_eigenvalues(m).into_iter().fold(f64::INFINITY, f64::min)
}

/// Eigenvalues of the symmetric part of `m`, ascending.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = symmetric_part(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Solves `op * X = rhs`.
///
/// With `symmetric` set, `op` is replaced by its symmetric part and inverted
/// through its eigendecomposition; otherwise an LU solve is used. Both paths
/// refuse operators whose condition number exceeds [`CONDITION_LIMIT`].
pub fn solve_gain(
    op: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
    symmetric: bool,
    operator: &'static str,
    time: f64,
) -> Result<DMatrix<f64>> {
    if symmetric {
        let eig = symmetric_part(op).symmetric_eigen();
        let (lo, hi) = eig
            .eigenvalues
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| {
                (lo.min(v.abs()), hi.max(v.abs()))
            });
        if !(lo > 0.0) || hi / lo > CONDITION_LIMIT || !hi.is_finite() {
            return Err(Error::SingularGain {
                operator,
                time,
                min_abs_eig: lo,
            });
        }
        let v = &eig.eigenvectors;
        let inv_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l));
        Ok(v * inv_diag * (v.transpose() * rhs))
    } else {
        let sv = op.clone().svd(false, false).singular_values;
        let (lo, hi) = sv.iter().fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| {
            (lo.min(*v), hi.max(*v))
        });
        let singular = || Error::SingularGain {
            operator,
            time,
            min_abs_eig: lo,
        };
        if !(lo > 0.0) || hi / lo > CONDITION_LIMIT || !hi.is_finite() {
            return Err(singular());
        }
        op.clone().lu().solve(rhs).ok_or_else(singular)
    }
}

/// Row-major dense matrix used on the simulation hot path.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FlatMat {
    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(m[(i, j)]);
            }
        }
        FlatMat { rows, cols, data }
    }

    /// `out += scale * self * x`
    #[inline]
    pub fn mul_add(&self, x: &[f64], scale: f64, out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(x) {
                acc += a * b;
            }
            *o += scale * acc;
        }
    }

    /// `x^T self x` for square matrices.
    #[inline]
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut r = 0.0;
            for (a, b) in row.iter().zip(x) {
                r += a * b;
            }
            acc += x[i] * r;
        }
        acc
    }

    /// `y^T self x`
    #[inline]
    pub fn bilinear(&self, y: &[f64], x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut r = 0.0;
            for (a, b) in row.iter().zip(x) {
                r += a * b;
            }
            acc += y[i] * r;
        }
        acc
    }
}

/// Quadratic form `x^T S x` for a dense matrix.
pub fn quad_form(s: &DMatrix<f64>, x: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..s.nrows() {
        for j in 0..s.ncols() {
            acc += x[i] * s[(i, j)] * x[j];
        }
    }
    acc
}

/// Least-squares slope and intercept of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| (b - intercept - slope * a).powi(2))
        .sum();
    (slope, intercept, (rss / n).sqrt())
}
