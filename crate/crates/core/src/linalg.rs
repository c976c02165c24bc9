//! Small dense linear algebra on row-major `f64` matrices: Cholesky
//! solves, one-sided Jacobi SVD and determinants.

use crate::error::{CoreError, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(CoreError::InvalidArgument("ragged matrix rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols.max(1)).map(<[f64]>::to_vec).collect()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                *t.at_mut(c, r) = self.at(r, c);
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let orow = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in orow.iter_mut().zip(&other.data[k * other.cols..(k + 1) * other.cols]) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.rows, other.rows, "t_matmul shape mismatch");
        let mut out = Mat::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let brow = &other.data[r * other.cols..(r + 1) * other.cols];
            for i in 0..self.cols {
                let a = self.data[r * self.cols + i];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out.data[i * other.cols..(i + 1) * other.cols].iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite
/// matrix.
pub fn cholesky(a: &Mat) -> Result<Mat> {
    let n = a.rows;
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.at(i, j);
            for k in 0..j {
                s -= l.at(i, k) * l.at(j, k);
            }
            if i == j {
                if !(s > 0.0) {
                    return Err(CoreError::Numeric(format!("matrix is not positive definite (pivot {i}: {s:e})")));
                }
                *l.at_mut(i, i) = s.sqrt();
            } else {
                *l.at_mut(i, j) = s / l.at(j, j);
            }
        }
    }
    Ok(l)
}

/// Solves `L Lᵀ x = b` given the Cholesky factor `L`.
pub fn cholesky_solve(l: &Mat, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l.at(i, k) * y[k];
        }
        y[i] /= l.at(i, i);
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l.at(k, i) * y[k];
        }
        y[i] /= l.at(i, i);
    }
    y
}

/// Thin SVD `A = U diag(s) Vᵀ` of a square or tall matrix by one-sided
/// Jacobi rotations. Singular values come out in descending order.
pub struct Svd {
    pub u: Mat,
    pub s: Vec<f64>,
    pub v: Mat,
}

/// Singular values below `RANK_TOL * s_max` count as zero.
pub const RANK_TOL: f64 = 1e-12;

pub fn svd(a: &Mat) -> Result<Svd> {
    let (m, n) = (a.rows, a.cols);
    if m < n {
        return Err(CoreError::InvalidArgument(format!("svd needs rows >= cols, got {m}x{n}")));
    }
    // Work on columns: store Aᵀ so each column is a contiguous row.
    let mut cols = a.transpose();
    let mut v = Mat::identity(n);
    let tol = 1e-15;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (cp, cq) = (&cols.data[p * m..(p + 1) * m], &cols.data[q * m..(q + 1) * m]);
                let alpha: f64 = cp.iter().map(|x| x * x).sum();
                let beta: f64 = cq.iter().map(|x| x * x).sum();
                let gamma: f64 = cp.iter().zip(cq).map(|(x, y)| x * y).sum();
                if gamma.abs() <= tol * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (cols.data[p * m + i], cols.data[q * m + i]);
                    cols.data[p * m + i] = c * x - s * y;
                    cols.data[q * m + i] = s * x + c * y;
                }
                for i in 0..n {
                    let (x, y) = (v.at(i, p), v.at(i, q));
                    *v.at_mut(i, p) = c * x - s * y;
                    *v.at_mut(i, q) = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|j| cols.data[j * m..(j + 1) * m].iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let mut u = Mat::zeros(m, n);
    let mut vs = Mat::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let smax = norms.iter().copied().fold(0.0, f64::max);
    for (k, &j) in order.iter().enumerate() {
        let sv = norms[j];
        s.push(sv);
        for i in 0..n {
            *vs.at_mut(i, k) = v.at(i, j);
        }
        if sv > smax * RANK_TOL {
            for i in 0..m {
                *u.at_mut(i, k) = cols.data[j * m + i] / sv;
            }
        }
    }
    complete_basis(&mut u, &s, smax);
    Ok(Svd { u, s, v: vs })
}

/// Fills the columns of `u` belonging to zero singular values with an
/// orthonormal complement (Gram-Schmidt against unit vectors).
fn complete_basis(u: &mut Mat, s: &[f64], smax: f64) {
    let (m, n) = (u.rows, u.cols);
    for k in 0..n {
        if s[k] > smax * RANK_TOL {
            continue;
        }
        for e in 0..m {
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            for j in 0..n {
                if j == k {
                    continue;
                }
                let dot: f64 = (0..m).map(|i| u.at(i, j) * cand[i]).sum();
                for (i, c) in cand.iter_mut().enumerate() {
                    *c -= dot * u.at(i, j);
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for (i, c) in cand.iter().enumerate() {
                    *u.at_mut(i, k) = c / norm;
                }
                break;
            }
        }
    }
}

/// Determinant by Gaussian elimination with partial pivoting.
pub fn det(a: &Mat) -> f64 {
    let n = a.rows;
    let mut m = a.data.clone();
    let mut d = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| m[x * n + c].abs().total_cmp(&m[y * n + c].abs())).expect("non-empty");
        if m[p * n + c] == 0.0 {
            return 0.0;
        }
        if p != c {
            for k in 0..n {
                m.swap(p * n + k, c * n + k);
            }
            d = -d;
        }
        let piv = m[c * n + c];
        d *= piv;
        for r in c + 1..n {
            let f = m[r * n + c] / piv;
            if f != 0.0 {
                for k in c..n {
                    m[r * n + k] -= f * m[c * n + k];
                }
            }
        }
    }
    d
}
