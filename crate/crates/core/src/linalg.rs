//! Small dense real linear algebra: partial-pivoting LU, a rank-revealing
//! least-squares solve, and eigenvalues by balancing, Householder
//! Hessenberg reduction and Francis double-shift QR.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Pivots below this fraction of the largest initial column norm are
/// treated as zero.
pub const RANK_TOL: f64 = 1e-10;

/// QR sweeps allowed per eigenvalue before giving up.
pub const MAX_QR_SWEEPS: usize = 40;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is {0}x{1}, expected square")]
    NotSquare(usize, usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("singular system: pivot {pivot:e} at index {index} below threshold {threshold:e}")]
    Singular {
        index: usize,
        pivot: f64,
        threshold: f64,
    },
    #[error("QR iteration did not converge for eigenvalue {index} after {iterations} sweeps")]
    NoConvergence { index: usize, iterations: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Panics if the rows are ragged.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.as_ref().len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.as_ref().len(), c, "ragged rows");
            data.extend_from_slice(row.as_ref());
        }
        DenseMatrix { rows: r, cols: c, data }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch {
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if v.len() != self.cols {
            return Err(LinalgError::DimensionMismatch {
                expected: self.cols,
                found: v.len(),
            });
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::DimensionMismatch {
                expected: self.cols,
                found: other.rows,
            });
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn scaled(&self, f: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * f).collect(),
        }
    }

    /// `self + c * I`.
    pub fn shift_diagonal(&self, c: f64) -> DenseMatrix {
        let mut out = self.clone();
        for i in 0..self.rows.min(self.cols) {
            out[(i, i)] += c;
        }
        out
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    fn max_column_norm(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)].powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Determinant via partial-pivoting elimination (no rank threshold).
    pub fn determinant(&self) -> Result<f64, LinalgError> {
        if !self.is_square() {
            return Err(LinalgError::NotSquare(self.rows, self.cols));
        }
        let n = self.rows;
        let mut a = self.clone();
        let mut det = 1.0;
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[(i, k)].abs().total_cmp(&a[(j, k)].abs()))
                .unwrap();
            if a[(p, k)] == 0.0 {
                return Ok(0.0);
            }
            if p != k {
                a.swap_rows(p, k);
                det = -det;
            }
            det *= a[(k, k)];
            for i in k + 1..n {
                let f = a[(i, k)] / a[(k, k)];
                for j in k..n {
                    a[(i, j)] -= f * a[(k, j)];
                }
            }
        }
        Ok(det)
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for j in 0..self.cols {
            self.data.swap(a * self.cols + j, b * self.cols + j);
        }
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Display for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            let row: Vec<String> = self.row(i).iter().map(|v| format!("{v:>14.6e}")).collect();
            writeln!(f, "[{}]", row.join(" "))?;
        }
        Ok(())
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `PA = LU` with partial pivoting. Construction fails on the first pivot
/// below `RANK_TOL * max column norm`.
#[derive(Clone, Debug)]
pub struct LuDecomposition {
    lu: DenseMatrix,
    perm: Vec<usize>,
    min_pivot: f64,
}

impl LuDecomposition {
    pub fn new(a: &DenseMatrix) -> Result<Self, LinalgError> {
        if !a.is_square() {
            return Err(LinalgError::NotSquare(a.rows, a.cols));
        }
        let n = a.rows;
        let threshold = RANK_TOL * a.max_column_norm();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut min_pivot = f64::INFINITY;
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| lu[(i, k)].abs().total_cmp(&lu[(j, k)].abs()))
                .unwrap();
            let pivot = lu[(p, k)];
            if pivot.abs() <= threshold || !pivot.is_finite() {
                return Err(LinalgError::Singular {
                    index: k,
                    pivot: pivot.abs(),
                    threshold,
                });
            }
            lu.swap_rows(p, k);
            perm.swap(p, k);
            min_pivot = min_pivot.min(pivot.abs());
            for i in k + 1..n {
                let f = lu[(i, k)] / pivot;
                lu[(i, k)] = f;
                for j in k + 1..n {
                    lu[(i, j)] -= f * lu[(k, j)];
                }
            }
        }
        if n == 0 {
            min_pivot = 0.0;
        }
        Ok(LuDecomposition { lu, perm, min_pivot })
    }

    /// Smallest pivot magnitude encountered, `min |U_ii|`.
    pub fn min_pivot(&self) -> f64 {
        self.min_pivot
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let n = self.lu.rows;
        if b.len() != n {
            return Err(LinalgError::DimensionMismatch {
                expected: n,
                found: b.len(),
            });
        }
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let s: f64 = (0..i).map(|j| self.lu[(i, j)] * x[j]).sum();
            x[i] -= s;
        }
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|j| self.lu[(i, j)] * x[j]).sum();
            x[i] = (x[i] - s) / self.lu[(i, i)];
        }
        Ok(x)
    }
}

pub fn lu_solve(a: &DenseMatrix, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    if b.len() != a.rows {
        return Err(LinalgError::DimensionMismatch {
            expected: a.rows,
            found: b.len(),
        });
    }
    LuDecomposition::new(a)?.solve(b)
}

/// `||Ax - b||_inf`.
pub fn residual_inf(a: &DenseMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.mul_vec(x).expect("dimension checked by caller");
    ax.iter().zip(b).fold(0.0, |m, (p, q)| m.max((p - q).abs()))
}

#[derive(Clone, Debug)]
pub struct RankRevealingSolution {
    /// Minimum-norm least-squares solution.
    pub solution: Vec<f64>,
    /// Orthonormal basis of the numerical kernel.
    pub kernel: Vec<Vec<f64>>,
    /// `||A x - b||_2` at `solution`.
    pub residual: f64,
    pub rank: usize,
}

/// Least-squares solve by Householder QR with column pivoting. Columns
/// whose remaining norm falls below `RANK_TOL * max column norm` are
/// declared dependent.
pub fn rank_revealing_solve(a: &DenseMatrix, b: &[f64]) -> Result<RankRevealingSolution, LinalgError> {
    let (m, n) = (a.rows, a.cols);
    if b.len() != m {
        return Err(LinalgError::DimensionMismatch {
            expected: m,
            found: b.len(),
        });
    }
    let threshold = RANK_TOL * a.max_column_norm();
    let mut r = a.clone();
    let mut qb = b.to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rank = 0;
    for k in 0..m.min(n) {
        let col_norm = |r: &DenseMatrix, j: usize| (k..m).map(|i| r[(i, j)].powi(2)).sum::<f64>().sqrt();
        let (jmax, nmax) = (k..n)
            .map(|j| (j, col_norm(&r, j)))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        if nmax <= threshold {
            break;
        }
        if jmax != k {
            for i in 0..m {
                let t = r[(i, k)];
                r[(i, k)] = r[(i, jmax)];
                r[(i, jmax)] = t;
            }
            perm.swap(k, jmax);
        }
        // Householder reflector zeroing r[k+1.., k].
        let alpha = if r[(k, k)] > 0.0 { -nmax } else { nmax };
        let mut v: Vec<f64> = (k..m).map(|i| r[(i, k)]).collect();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for j in k..n {
                let dot: f64 = (k..m).map(|i| v[i - k] * r[(i, j)]).sum();
                let f = 2.0 * dot / vnorm2;
                for i in k..m {
                    r[(i, j)] -= f * v[i - k];
                }
            }
            let dot: f64 = (k..m).map(|i| v[i - k] * qb[i]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..m {
                qb[i] -= f * v[i - k];
            }
        }
        rank = k + 1;
    }

    let back_sub = |rhs: &[f64]| -> Vec<f64> {
        let mut y = vec![0.0; rank];
        for i in (0..rank).rev() {
            let s: f64 = (i + 1..rank).map(|j| r[(i, j)] * y[j]).sum();
            y[i] = (rhs[i] - s) / r[(i, i)];
        }
        y
    };

    let y = back_sub(&qb[..rank]);
    let mut x = vec![0.0; n];
    for (i, yi) in y.iter().enumerate() {
        x[perm[i]] = *yi;
    }
    let residual = norm2(&qb[rank..]);

    let mut kernel: Vec<Vec<f64>> = Vec::new();
    for j in rank..n {
        let col: Vec<f64> = (0..rank).map(|i| r[(i, j)]).collect();
        let w = back_sub(&col);
        let mut v = vec![0.0; n];
        for (i, wi) in w.iter().enumerate() {
            v[perm[i]] = -wi;
        }
        v[perm[j]] = 1.0;
        for u in &kernel {
            let d: f64 = u.iter().zip(&v).map(|(p, q)| p * q).sum();
            v.iter_mut().zip(u).for_each(|(vi, ui)| *vi -= d * ui);
        }
        let nv = norm2(&v);
        v.iter_mut().for_each(|vi| *vi /= nv);
        kernel.push(v);
    }
    for u in &kernel {
        let d: f64 = u.iter().zip(&x).map(|(p, q)| p * q).sum();
        x.iter_mut().zip(u).for_each(|(xi, ui)| *xi -= d * ui);
    }
    Ok(RankRevealingSolution {
        solution: x,
        kernel,
        residual,
        rank,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eigenvalue {
    pub re: f64,
    pub im: f64,
}

impl fmt::Display for Eigenvalue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.im == 0.0 {
            write!(f, "{}", crate::fmt_f64(self.re))
        } else {
            write!(f, "{} {} {}i", crate::fmt_f64(self.re), if self.im < 0.0 { "-" } else { "+" }, crate::fmt_f64(self.im.abs()))
        }
    }
}

/// Eigenvalues of a real square matrix, complex ones in conjugate pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: Vec<Eigenvalue>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn max_real(&self) -> f64 {
        self.eigenvalues.iter().map(|e| e.re).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Sorted by real part, then imaginary part.
    pub fn sorted(&self) -> Vec<Eigenvalue> {
        let mut v = self.eigenvalues.clone();
        v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        v
    }
}

pub fn eigenvalues(a: &DenseMatrix) -> Result<Spectrum, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare(a.rows, a.cols));
    }
    if a.data.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite("eigenvalue input"));
    }
    let (isolated, mut h) = isolate(a.to_rows());
    let mut eigenvalues: Vec<Eigenvalue> = isolated.into_iter().map(|re| Eigenvalue { re, im: 0.0 }).collect();
    if !h.is_empty() {
        balance(&mut h);
        hessenberg(&mut h);
        let (wr, wi) = hqr(&mut h)?;
        eigenvalues.extend(wr.into_iter().zip(wi).map(|(re, im)| Eigenvalue { re, im }));
    }
    if eigenvalues.iter().any(|e| !e.re.is_finite() || !e.im.is_finite()) {
        return Err(LinalgError::NonFinite("eigenvalues (overflow)"));
    }
    Ok(Spectrum { eigenvalues })
}

/// Splits off eigenvalues exposed by a row or column that is zero off the
/// diagonal, repeating on what remains. A symmetric permutation would make
/// the matrix block triangular with these as 1x1 blocks, so they are exact
/// and are removed before QR iteration sees them.
fn isolate(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut found = Vec::new();
    loop {
        let n = a.len();
        let pick = (0..n).find(|&i| {
            (0..n).all(|j| j == i || a[i][j] == 0.0) || (0..n).all(|j| j == i || a[j][i] == 0.0)
        });
        let Some(i) = pick else { break };
        found.push(a[i][i]);
        a.remove(i);
        for row in a.iter_mut() {
            row.remove(i);
        }
    }
    (found, a)
}

/// Parlett–Reinsch diagonal balancing with radix-2 scale factors.
fn balance(a: &mut [Vec<f64>]) {
    const RADIX: f64 = 2.0;
    let n = a.len();
    let sqrdx = RADIX * RADIX;
    loop {
        let mut done = true;
        for i in 0..n {
            let mut c = 0.0;
            let mut r = 0.0;
            for j in 0..n {
                if j != i {
                    c += a[j][i].abs();
                    r += a[i][j].abs();
                }
            }
            if c != 0.0 && r != 0.0 {
                let s = c + r;
                let mut f = 1.0;
                let mut g = r / RADIX;
                while c < g {
                    f *= RADIX;
                    c *= sqrdx;
                }
                g = r * RADIX;
                while c > g {
                    f /= RADIX;
                    c /= sqrdx;
                }
                if (c + r) / f < 0.95 * s {
                    done = false;
                    let g = 1.0 / f;
                    for j in 0..n {
                        a[i][j] *= g;
                    }
                    for row in a.iter_mut() {
                        row[i] *= f;
                    }
                }
            }
        }
        if done {
            break;
        }
    }
}

/// Householder reduction to upper Hessenberg form, in place.
fn hessenberg(h: &mut [Vec<f64>]) {
    let n = h.len();
    if n < 3 {
        return;
    }
    let high = n - 1;
    let mut ort = vec![0.0; n];
    for m in 1..high {
        let scale: f64 = (m..=high).map(|i| h[i][m - 1].abs()).sum();
        if scale == 0.0 {
            continue;
        }
        let mut hh = 0.0;
        for i in (m..=high).rev() {
            ort[i] = h[i][m - 1] / scale;
            hh += ort[i] * ort[i];
        }
        let mut g = hh.sqrt();
        if ort[m] > 0.0 {
            g = -g;
        }
        hh -= ort[m] * g;
        ort[m] -= g;
        for j in m..n {
            let f: f64 = (m..=high).rev().map(|i| ort[i] * h[i][j]).sum::<f64>() / hh;
            for i in m..=high {
                h[i][j] -= f * ort[i];
            }
        }
        for row in h.iter_mut().take(high + 1) {
            let f: f64 = (m..=high).rev().map(|j| ort[j] * row[j]).sum::<f64>() / hh;
            for j in m..=high {
                row[j] -= f * ort[j];
            }
        }
        ort[m] *= scale;
        h[m][m - 1] = scale * g;
    }
}

/// Francis double-shift QR on an upper Hessenberg matrix (eigenvalues
/// only), with the classical exceptional shifts at sweeps 10 and 30.
#[allow(clippy::many_single_char_names, unused_assignments)]
fn hqr(h: &mut [Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>), LinalgError> {
    let nn = h.len();
    let mut wr = vec![0.0; nn];
    let mut wi = vec![0.0; nn];
    if nn == 0 {
        return Ok((wr, wi));
    }
    let eps = f64::EPSILON;
    let low: isize = 0;
    let mut n: isize = nn as isize - 1;
    let mut exshift = 0.0;
    let (mut p, mut q, mut r, mut s, mut z) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut x, mut y, mut w);

    let mut norm = 0.0;
    for i in 0..nn {
        for j in i.saturating_sub(1)..nn {
            norm += h[i][j].abs();
        }
    }

    let mut iter = 0usize;
    while n >= low {
        let nu = n as usize;
        // Find a negligible subdiagonal element.
        let mut l = n;
        while l > low {
            let lu = l as usize;
            s = h[lu - 1][lu - 1].abs() + h[lu][lu].abs();
            if s == 0.0 {
                s = norm;
            }
            if h[lu][lu - 1].abs() < eps * s {
                break;
            }
            l -= 1;
        }

        if l == n {
            // One root found.
            h[nu][nu] += exshift;
            wr[nu] = h[nu][nu];
            wi[nu] = 0.0;
            n -= 1;
            iter = 0;
        } else if l == n - 1 {
            // Two roots found.
            w = h[nu][nu - 1] * h[nu - 1][nu];
            p = (h[nu - 1][nu - 1] - h[nu][nu]) / 2.0;
            q = p * p + w;
            z = q.abs().sqrt();
            h[nu][nu] += exshift;
            h[nu - 1][nu - 1] += exshift;
            x = h[nu][nu];
            if q >= 0.0 {
                z = if p >= 0.0 { p + z } else { p - z };
                wr[nu - 1] = x + z;
                wr[nu] = wr[nu - 1];
                if z != 0.0 {
                    wr[nu] = x - w / z;
                }
                wi[nu - 1] = 0.0;
                wi[nu] = 0.0;
            } else {
                wr[nu - 1] = x + p;
                wr[nu] = x + p;
                wi[nu - 1] = z;
                wi[nu] = -z;
            }
            n -= 2;
            iter = 0;
        } else {
            x = h[nu][nu];
            y = 0.0;
            w = 0.0;
            if l < n {
                y = h[nu - 1][nu - 1];
                w = h[nu][nu - 1] * h[nu - 1][nu];
            }
            if iter == 10 {
                exshift += x;
                for (i, row) in h.iter_mut().enumerate().take(nu + 1) {
                    row[i] -= x;
                }
                s = h[nu][nu - 1].abs() + h[nu - 1][nu - 2].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            if iter == 30 {
                s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for (i, row) in h.iter_mut().enumerate().take(nu + 1) {
                        row[i] -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = x;
                    w = x;
                }
            }
            iter += 1;
            if iter > MAX_QR_SWEEPS {
                return Err(LinalgError::NoConvergence {
                    index: nu,
                    iterations: iter - 1,
                });
            }

            // Look for two consecutive small subdiagonal elements.
            let mut m = n - 2;
            while m >= l {
                let mu = m as usize;
                z = h[mu][mu];
                r = x - z;
                s = y - z;
                p = (r * s - w) / h[mu + 1][mu] + h[mu][mu + 1];
                q = h[mu + 1][mu + 1] - z - r - s;
                r = h[mu + 2][mu + 1];
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                if h[mu][mu - 1].abs() * (q.abs() + r.abs())
                    < eps * (p.abs() * (h[mu - 1][mu - 1].abs() + z.abs() + h[mu + 1][mu + 1].abs()))
                {
                    break;
                }
                m -= 1;
            }
            let mu = m as usize;
            for i in mu + 2..=nu {
                h[i][i - 2] = 0.0;
                if i > mu + 2 {
                    h[i][i - 3] = 0.0;
                }
            }

            // Double QR step on rows l..n and columns m..n.
            let lu = l as usize;
            for k in mu..nu {
                let notlast = k != nu - 1;
                if k != mu {
                    p = h[k][k - 1];
                    q = h[k + 1][k - 1];
                    r = if notlast { h[k + 2][k - 1] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x == 0.0 {
                        continue;
                    }
                    p /= x;
                    q /= x;
                    r /= x;
                }
                s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s != 0.0 {
                    if k != mu {
                        h[k][k - 1] = -s * x;
                    } else if lu != mu {
                        h[k][k - 1] = -h[k][k - 1];
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..nn {
                        p = h[k][j] + q * h[k + 1][j];
                        if notlast {
                            p += r * h[k + 2][j];
                            h[k + 2][j] -= p * z;
                        }
                        h[k][j] -= p * x;
                        h[k + 1][j] -= p * y;
                    }
                    for row in h.iter_mut().take(nu.min(k + 3) + 1) {
                        p = x * row[k] + y * row[k + 1];
                        if notlast {
                            p += z * row[k + 2];
                            row[k + 2] -= p * r;
                        }
                        row[k] -= p;
                        row[k + 1] -= p * q;
                    }
                }
            }
        }
    }
    Ok((wr, wi))
}
