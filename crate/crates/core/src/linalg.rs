//! Dense and skyline linear algebra in log space.
//!
//! Determinants of the matching and Fredholm systems span hundreds of orders
//! of magnitude across a scan, so they are carried as `ln|d|` plus a unit
//! phase and only exponentiated at the very end.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// A nonzero complex number stored as `exp(ln_abs) * phase`, `|phase| = 1`.
/// `ln_abs = -inf` encodes an exact zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogComplex {
    pub ln_abs: f64,
    pub phase: Complex64,
}

impl LogComplex {
    pub const ONE: LogComplex = LogComplex {
        ln_abs: 0.0,
        phase: Complex64 { re: 1.0, im: 0.0 },
    };

    pub fn from_complex(z: Complex64) -> Self {
        let r = z.norm();
        if r == 0.0 {
            LogComplex {
                ln_abs: f64::NEG_INFINITY,
                phase: Complex64::new(1.0, 0.0),
            }
        } else {
            LogComplex {
                ln_abs: r.ln(),
                phase: z / r,
            }
        }
    }

    /// `e^z`, kept in log form.
    pub fn exp_of(z: Complex64) -> Self {
        LogComplex {
            ln_abs: z.re,
            phase: Complex64::from_polar(1.0, z.im),
        }
    }

    /// Principal complex logarithm `ln|z| + i arg z`.
    pub fn ln(&self) -> Complex64 {
        Complex64::new(self.ln_abs, self.phase.arg())
    }

    /// Value as an ordinary complex number (may overflow to infinity).
    pub fn to_complex(&self) -> Complex64 {
        self.phase * self.ln_abs.exp()
    }

    pub fn abs(&self) -> f64 {
        self.ln_abs.exp()
    }

    pub fn is_zero(&self) -> bool {
        self.ln_abs == f64::NEG_INFINITY
    }

    pub fn is_finite(&self) -> bool {
        self.ln_abs.is_finite() && self.phase.re.is_finite() && self.phase.im.is_finite()
    }

    pub fn mul(&self, other: &LogComplex) -> LogComplex {
        let p = self.phase * other.phase;
        LogComplex {
            ln_abs: self.ln_abs + other.ln_abs,
            phase: p / p.norm(),
        }
    }

    pub fn div(&self, other: &LogComplex) -> LogComplex {
        let p = self.phase * other.phase.conj();
        LogComplex {
            ln_abs: self.ln_abs - other.ln_abs,
            phase: p / p.norm(),
        }
    }

    pub fn mul_complex(&self, z: Complex64) -> LogComplex {
        self.mul(&LogComplex::from_complex(z))
    }
}

/// Accumulates a product of many complex factors without overflow.
#[derive(Debug, Clone, Copy)]
pub struct LogProduct {
    ln_abs: f64,
    phase: Complex64,
}

impl Default for LogProduct {
    fn default() -> Self {
        LogProduct {
            ln_abs: 0.0,
            phase: Complex64::new(1.0, 0.0),
        }
    }
}

impl LogProduct {
    pub fn push(&mut self, z: Complex64) {
        let r = z.norm();
        if r == 0.0 {
            self.ln_abs = f64::NEG_INFINITY;
            return;
        }
        self.ln_abs += r.ln();
        self.phase *= z / r;
        // renormalize against drift
        let n = self.phase.norm();
        self.phase /= n;
    }

    pub fn push_log(&mut self, v: &LogComplex) {
        self.ln_abs += v.ln_abs;
        self.phase *= v.phase;
        let n = self.phase.norm();
        self.phase /= n;
    }

    pub fn finish(self) -> LogComplex {
        LogComplex {
            ln_abs: self.ln_abs,
            phase: self.phase,
        }
    }
}

/// Determinant of a dense matrix by LU with partial pivoting, in log space.
pub fn log_det(m: &DMatrix<Complex64>) -> LogComplex {
    assert!(m.is_square(), "log_det of a non-square matrix");
    let n = m.nrows();
    if n == 0 {
        return LogComplex::ONE;
    }
    let lu = m.clone().lu();
    let u = lu.u();
    let mut acc = LogProduct::default();
    for i in 0..n {
        acc.push(u[(i, i)]);
    }
    let mut out = acc.finish();
    if lu.p().determinant::<f64>() < 0.0 {
        out.phase = -out.phase;
    }
    out
}

/// Ratio of the largest to smallest pivot magnitude of a partially pivoted LU;
/// a cheap conditioning indicator.
pub fn pivot_ratio(m: &DMatrix<Complex64>) -> f64 {
    let n = m.nrows();
    if n == 0 {
        return 1.0;
    }
    let lu = m.clone().lu();
    let u = lu.u();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..n {
        let a = u[(i, i)].norm();
        lo = lo.min(a);
        hi = hi.max(a);
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Sparse matrix in compressed row form with a structurally symmetric
/// pattern, as produced by five-point stencils.
#[derive(Debug, Clone)]
pub struct SparseRows {
    pub n: usize,
    /// For each row, sorted `(column, value)` pairs.
    pub rows: Vec<Vec<(usize, Complex64)>>,
}

impl SparseRows {
    pub fn new(n: usize) -> Self {
        SparseRows {
            n,
            rows: vec![Vec::new(); n],
        }
    }

    /// Adds `v` at `(i, j)`, merging with an existing entry.
    pub fn add(&mut self, i: usize, j: usize, v: Complex64) {
        let row = &mut self.rows[i];
        match row.binary_search_by_key(&j, |&(c, _)| c) {
            Ok(pos) => row[pos].1 += v,
            Err(pos) => row.insert(pos, (j, v)),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        let row = &self.rows[i];
        match row.binary_search_by_key(&j, |&(c, _)| c) {
            Ok(pos) => row[pos].1,
            Err(_) => Complex64::new(0.0, 0.0),
        }
    }

    pub fn matvec(&self, x: &[Complex64]) -> Vec<Complex64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, v)| v * x[j]).sum())
            .collect()
    }

    /// `self + a * other` on the union pattern.
    pub fn axpy(&self, a: Complex64, other: &SparseRows) -> SparseRows {
        let mut out = self.clone();
        for (i, row) in other.rows.iter().enumerate() {
            for &(j, v) in row {
                out.add(i, j, a * v);
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<Complex64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                m[(i, j)] = v;
            }
        }
        m
    }
}

/// LU factorization without pivoting in skyline (variable band) storage.
///
/// The profile is symmetric: row `i` of `L` and column `i` of `U` both start
/// at `first[i]`, the smallest column index in row `i` of the input. For
/// five-point stencils in column-major node order this is the node one grid
/// column to the left, so fill stays within the envelope.
#[derive(Debug, Clone)]
pub struct SkylineLu {
    n: usize,
    first: Vec<usize>,
    /// `lower[i][j - first[i]]` = L(i, j) for `first[i] <= j < i`.
    lower: Vec<Vec<Complex64>>,
    /// `upper[i][j - first[i]]` = U(j, i) for `first[i] <= j <= i`.
    upper: Vec<Vec<Complex64>>,
}

impl SkylineLu {
    pub fn factor(a: &SparseRows) -> Result<SkylineLu> {
        let n = a.n;
        let mut first: Vec<usize> = a
            .rows
            .iter()
            .enumerate()
            .map(|(i, row)| row.first().map(|&(j, _)| j.min(i)).unwrap_or(i))
            .collect();
        // symmetric envelope: column profile must match the row profile
        for (i, row) in a.rows.iter().enumerate() {
            for &(j, _) in row {
                if j > i && first[j] > i {
                    first[j] = i;
                }
            }
        }
        let mut lower: Vec<Vec<Complex64>> = Vec::with_capacity(n);
        let mut upper: Vec<Vec<Complex64>> = Vec::with_capacity(n);
        let zero = Complex64::new(0.0, 0.0);
        for i in 0..n {
            let fi = first[i];
            let mut lrow = vec![zero; i - fi];
            let mut ucol = vec![zero; i - fi + 1];
            for &(j, v) in &a.rows[i] {
                if j < i {
                    lrow[j - fi] = v;
                }
            }
            // column i of A: entries (j, i) with j <= i
            for j in fi..=i {
                ucol[j - fi] = a.get(j, i);
            }
            // Doolittle sweep over j = fi..i
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                // U(j, i) = A(j, i) - sum_k L(j, k) U(k, i)
                let mut s = zero;
                let lj = &lower[j];
                for k in k0..j {
                    s += lj[k - fj] * ucol[k - fi];
                }
                ucol[j - fi] -= s;
                // L(i, j) = (A(i, j) - sum_k L(i, k) U(k, j)) / U(j, j)
                let uj = &upper[j];
                let mut t = zero;
                for k in k0..j {
                    t += lrow[k - fi] * uj[k - fj];
                }
                let piv = uj[j - fj];
                lrow[j - fi] = (lrow[j - fi] - t) / piv;
            }
            // diagonal U(i, i)
            let mut s = zero;
            for k in fi..i {
                s += lrow[k - fi] * ucol[k - fi];
            }
            ucol[i - fi] -= s;
            if ucol[i - fi].norm() == 0.0 || !ucol[i - fi].re.is_finite() {
                return Err(Error::Singular(format!("zero pivot at row {i}")));
            }
            lower.push(lrow);
            upper.push(ucol);
        }
        Ok(SkylineLu {
            n,
            first,
            lower,
            upper,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn log_det(&self) -> LogComplex {
        let mut acc = LogProduct::default();
        for i in 0..self.n {
            acc.push(self.upper[i][i - self.first[i]]);
        }
        acc.finish()
    }

    /// Largest over smallest pivot magnitude.
    pub fn pivot_ratio(&self) -> f64 {
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..self.n {
            let a = self.upper[i][i - self.first[i]].norm();
            lo = lo.min(a);
            hi = hi.max(a);
        }
        if self.n == 0 {
            1.0
        } else {
            hi / lo
        }
    }

    pub fn solve_in_place(&self, b: &mut [Complex64]) {
        assert_eq!(b.len(), self.n);
        // L y = b
        for i in 0..self.n {
            let fi = self.first[i];
            let row = &self.lower[i];
            let mut s = Complex64::new(0.0, 0.0);
            for (k, l) in row.iter().enumerate() {
                s += l * b[fi + k];
            }
            b[i] -= s;
        }
        // U x = y, column oriented
        for i in (0..self.n).rev() {
            let fi = self.first[i];
            let col = &self.upper[i];
            let xi = b[i] / col[i - fi];
            b[i] = xi;
            for (k, u) in col[..i - fi].iter().enumerate() {
                b[fi + k] -= u * xi;
            }
        }
    }

    pub fn solve(&self, b: &[Complex64]) -> Vec<Complex64> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }
}

/// Largest singular value by power iteration on `A^H A`.
pub fn spectral_norm(a: &DMatrix<Complex64>, iters: usize) -> f64 {
    let n = a.ncols();
    if n == 0 || a.nrows() == 0 {
        return 0.0;
    }
    // deterministic, non-degenerate start vector
    let mut v = nalgebra::DVector::from_fn(n, |i, _| {
        Complex64::new(1.0 + 0.37 * ((i * 7919) % 101) as f64 / 101.0, 0.1)
    });
    let nv = v.norm();
    v /= Complex64::new(nv, 0.0);
    let ah = a.adjoint();
    let mut sigma = 0.0;
    for _ in 0..iters {
        let w = a * &v;
        let z = &ah * &w;
        let nz = z.norm();
        if nz == 0.0 {
            return 0.0;
        }
        let next = nz.sqrt();
        v = z / Complex64::new(nz, 0.0);
        if (next - sigma).abs() <= 1e-12 * next {
            sigma = next;
            break;
        }
        sigma = next;
    }
    sigma
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn log_det_matches_direct() {
        let m = DMatrix::from_row_slice(
            3,
            3,
            &[c(2.0, 1.0), c(0.0, 1.0), c(1.0, 0.0), c(1.0, 0.0), c(3.0, 0.0), c(0.5, 0.5), c(0.0, 2.0), c(1.0, 1.0), c(4.0, -1.0)],
        );
        let d = m.determinant();
        let l = log_det(&m).to_complex();
        assert!((d - l).norm() < 1e-12 * d.norm());
    }

    #[test]
    fn skyline_matches_dense() {
        // 2D five-point pattern on a 4 x 3 grid, column-major
        let (nx, ny) = (4, 3);
        let n = nx * ny;
        let mut a = SparseRows::new(n);
        for ix in 0..nx {
            for iy in 0..ny {
                let i = ix * ny + iy;
                a.add(i, i, c(4.3, 0.2 * iy as f64));
                if iy > 0 {
                    a.add(i, i - 1, c(-1.0, 0.1));
                }
                if iy + 1 < ny {
                    a.add(i, i + 1, c(-1.1, 0.0));
                }
                if ix > 0 {
                    a.add(i, i - ny, c(-0.9, 0.0));
                }
                if ix + 1 < nx {
                    a.add(i, i + ny, c(-1.0, -0.2));
                }
            }
        }
        let lu = SkylineLu::factor(&a).unwrap();
        let dense = a.to_dense();
        let d = dense.determinant();
        assert!((lu.log_det().to_complex() - d).norm() < 1e-10 * d.norm());
        let b: Vec<Complex64> = (0..n).map(|i| c(i as f64, 1.0)).collect();
        let x = lu.solve(&b);
        let r = a.matvec(&x);
        for i in 0..n {
            assert!((r[i] - b[i]).norm() < 1e-10);
        }
    }

    #[test]
    fn log_product_does_not_overflow() {
        let mut p = LogProduct::default();
        for _ in 0..1000 {
            p.push(c(1e300, 1e300));
        }
        for _ in 0..1000 {
            p.push(c(1e-300, -1e-300));
        }
        let v = p.finish();
        assert!((v.ln_abs - 1000.0 * 2.0f64.ln()).abs() < 1e-8);
    }
}
