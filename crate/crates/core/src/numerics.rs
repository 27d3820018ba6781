//! Dense row-major `f64` linear algebra sized for narrow networks.
//!
//! Everything here targets matrices of a few dozen entries at most, so the
//! routines favour clarity and accuracy over blocking or SIMD.

use std::ops::{Deref, DerefMut, Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Off-diagonal tolerance for the one-sided Jacobi sweep.
pub const JACOBI_TOL: f64 = 1e-12;
/// Sweep cap before the SVD reports non-convergence.
pub const JACOBI_MAX_SWEEPS: usize = 64;

/// A dense real vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vec64(pub Vec<f64>);

impl Vec64 {
    pub fn zeros(n: usize) -> Self {
        Vec64(vec![0.0; n])
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Vec64(v.to_vec())
    }

    pub fn filled(n: usize, value: f64) -> Self {
        Vec64(vec![value; n])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Returns an error naming `what` if any entry is NaN or infinite.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.0.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!("{what}: entry {i} is {}", self.0[i]))),
        }
    }

    pub fn dot(&self, other: &Vec64) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.iter().zip(other.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn norm2(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Max-norm; 0 for an empty vector (use [`inf_norm_vec`] for the checked form).
    pub fn norm_inf(&self) -> f64 {
        self.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, s: f64) -> Vec64 {
        Vec64(self.iter().map(|v| v * s).collect())
    }

    pub fn add(&self, other: &Vec64) -> Vec64 {
        debug_assert_eq!(self.len(), other.len());
        Vec64(self.iter().zip(other.iter()).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &Vec64) -> Vec64 {
        debug_assert_eq!(self.len(), other.len());
        Vec64(self.iter().zip(other.iter()).map(|(a, b)| a - b).collect())
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Vec64) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(other.iter()) {
            *a += s * b;
        }
    }
}

impl Deref for Vec64 {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vec64 {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vec64 {
    fn from(v: Vec<f64>) -> Self {
        Vec64(v)
    }
}

/// A dense real matrix in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat64 { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat64::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Mat64::zeros(d.len(), d.len());
        for (i, v) in d.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    /// Builds a matrix from row-major storage, rejecting bad lengths and non-finite entries.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {i} is {}", data[i])));
        }
        Ok(Mat64 { rows, cols, data })
    }

    /// Builds a matrix from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if let Some(bad) = rows.iter().position(|row| row.len() != c) {
            return Err(Error::Dimension(format!("row {bad} has length {}, expected {c}", rows[bad].len())));
        }
        Mat64::from_row_major(r, c, rows.concat())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat64 {
        let mut t = Mat64::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matvec(&self, x: &[f64]) -> Vec64 {
        assert_eq!(x.len(), self.cols, "matvec: {}x{} times {}", self.rows, self.cols, x.len());
        Vec64(
            (0..self.rows)
                .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
                .collect(),
        )
    }

    /// `xᵀ A`, i.e. `Aᵀ x`.
    pub fn vecmat(&self, x: &[f64]) -> Vec64 {
        assert_eq!(x.len(), self.rows, "vecmat: {} times {}x{}", x.len(), self.rows, self.cols);
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += xi * a;
            }
        }
        Vec64(out)
    }

    pub fn matmul(&self, other: &Mat64) -> Mat64 {
        assert_eq!(self.cols, other.rows, "matmul: {:?} times {:?}", self.shape(), other.shape());
        let mut out = Mat64::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Mat64 {
        Mat64 { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn add(&self, other: &Mat64) -> Mat64 {
        assert_eq!(self.shape(), other.shape());
        Mat64 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Mat64) -> Mat64 {
        assert_eq!(self.shape(), other.shape());
        Mat64 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    /// Multiplies row `i` by `d[i]`, i.e. returns `diag(d) · self`.
    pub fn scale_rows(&self, d: &[f64]) -> Mat64 {
        assert_eq!(d.len(), self.rows);
        let mut out = self.clone();
        for (i, di) in d.iter().enumerate() {
            for v in &mut out.data[i * self.cols..(i + 1) * self.cols] {
                *v *= di;
            }
        }
        out
    }

    /// Returns `self · diag(d)`.
    pub fn scale_cols(&self, d: &[f64]) -> Mat64 {
        assert_eq!(d.len(), self.cols);
        let mut out = self.clone();
        for i in 0..self.rows {
            for (j, dj) in d.iter().enumerate() {
                out.data[i * self.cols + j] *= dj;
            }
        }
        out
    }

    /// Unchecked induced ∞-norm (0 for an empty matrix).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Mat64) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

impl Index<(usize, usize)> for Mat64 {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat64 {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Axis-aligned box `[lo, hi]` in `R^n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::Dimension(format!("box bounds of lengths {} and {}", lo.len(), hi.len())));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a < b)) {
            return Err(Error::InvalidArgument(format!("box needs finite lo < hi, got {lo:?} .. {hi:?}")));
        }
        Ok(BoxDomain { lo, hi })
    }

    /// The cube `[lo, hi]^n`.
    pub fn cube(n: usize, lo: f64, hi: f64) -> Result<Self> {
        BoxDomain::new(vec![lo; n], vec![hi; n])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn radius(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 0.5 * (b - a)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *a <= *v && v <= b)
    }

    /// Closest point of the box.
    pub fn clamp(&self, x: &mut [f64]) {
        for (v, (a, b)) in x.iter_mut().zip(self.lo.iter().zip(&self.hi)) {
            *v = v.clamp(*a, *b);
        }
    }
}

/// Extreme singular values and, for square input, the absolute determinant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralSummary {
    pub sigma_max: f64,
    pub sigma_min: f64,
    /// `|det A|` for square `A`; 0 for non-square input.
    pub abs_det: f64,
    pub square: bool,
}

/// Max-norm of a nonempty vector.
pub fn inf_norm_vec(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Dimension("max-norm of an empty vector".into()));
    }
    Ok(v.iter().fold(0.0_f64, |m, x| m.max(x.abs())))
}

/// Induced ∞-norm (max row absolute sum) of a nonempty matrix.
pub fn inf_norm_mat(a: &Mat64) -> Result<f64> {
    if a.rows() == 0 || a.cols() == 0 {
        return Err(Error::Dimension(format!("induced norm of a {}x{} matrix", a.rows(), a.cols())));
    }
    Ok(a.norm_inf())
}

/// Singular values of `a` in descending order, by cyclic one-sided Jacobi.
///
/// Returns `min(rows, cols)` values. Works on `aᵀ` when `a` is wide so that the
/// column count never exceeds the row count.
pub fn singular_values(a: &Mat64) -> Result<Vec<f64>> {
    if !a.is_finite() {
        return Err(Error::NonFinite("singular_values input".into()));
    }
    let work = if a.rows() < a.cols() { a.transpose() } else { a.clone() };
    let (m, n) = work.shape();
    if n == 0 {
        return Ok(Vec::new());
    }
    // Column-major copy so column rotations touch contiguous memory.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| work[(i, j)]).collect()).collect();

    let mut converged = n == 1;
    let mut residual = 0.0;
    for _ in 0..JACOBI_MAX_SWEEPS {
        residual = 0.0_f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for k in 0..m {
                        alpha += cp[k] * cp[k];
                        beta += cq[k] * cq[k];
                        gamma += cp[k] * cq[k];
                    }
                    (alpha, beta, gamma)
                };
                let scale = (alpha * beta).sqrt();
                if scale == 0.0 {
                    continue;
                }
                let off = gamma.abs() / scale;
                residual = residual.max(off);
                if off <= JACOBI_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                let (cp, cq) = (&mut left[p], &mut right[0]);
                for k in 0..m {
                    let xp = cp[k];
                    let xq = cq[k];
                    cp[k] = c * xp - s * xq;
                    cq[k] = s * xp + c * xq;
                }
            }
        }
        if residual <= JACOBI_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps (residual {residual:e})"
        )));
    }
    let mut sv: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}

/// Extreme singular values plus `|det|` for square input.
pub fn spectral_summary(a: &Mat64) -> Result<SpectralSummary> {
    let sv = singular_values(a)?;
    let sigma_max = sv.first().copied().unwrap_or(0.0);
    let sigma_min = sv.last().copied().unwrap_or(0.0);
    let square = a.is_square();
    let abs_det = if square { lu_abs_det(a) } else { 0.0 };
    Ok(SpectralSummary { sigma_max, sigma_min, abs_det, square })
}

/// `|det(J + s·I)|` via LU with partial pivoting.
pub fn solve_det_shift(j: &Mat64, s: f64) -> Result<f64> {
    if !j.is_square() {
        return Err(Error::Dimension(format!("determinant of a {}x{} matrix", j.rows(), j.cols())));
    }
    let mut m = j.clone();
    for i in 0..m.rows() {
        m[(i, i)] += s;
    }
    Ok(lu_abs_det(&m))
}

fn lu_abs_det(a: &Mat64) -> f64 {
    let n = a.rows();
    let mut m = a.clone();
    let mut det = 1.0;
    for k in 0..n {
        let mut piv = k;
        let mut best = m[(k, k)].abs();
        for i in (k + 1)..n {
            let v = m[(i, k)].abs();
            if v > best {
                best = v;
                piv = i;
            }
        }
        if best == 0.0 {
            return 0.0;
        }
        if piv != k {
            for j in 0..n {
                let tmp = m[(k, j)];
                m[(k, j)] = m[(piv, j)];
                m[(piv, j)] = tmp;
            }
        }
        let pivot = m[(k, k)];
        det *= pivot;
        for i in (k + 1)..n {
            let f = m[(i, k)] / pivot;
            if f == 0.0 {
                continue;
            }
            for j in (k + 1)..n {
                m[(i, j)] -= f * m[(k, j)];
            }
        }
    }
    det.abs()
}

/// Solves `A x = b` by LU with partial pivoting; `None` when `A` is numerically singular.
pub fn lu_solve(a: &Mat64, b: &[f64]) -> Option<Vec<f64>> {
    let n = a.rows();
    assert!(a.is_square() && b.len() == n);
    let mut m = a.clone();
    let mut x = b.to_vec();
    let scale = a.norm_inf().max(f64::MIN_POSITIVE);
    for k in 0..n {
        let mut piv = k;
        for i in (k + 1)..n {
            if m[(i, k)].abs() > m[(piv, k)].abs() {
                piv = i;
            }
        }
        if m[(piv, k)].abs() <= 1e-14 * scale {
            return None;
        }
        if piv != k {
            for j in 0..n {
                let tmp = m[(k, j)];
                m[(k, j)] = m[(piv, j)];
                m[(piv, j)] = tmp;
            }
            x.swap(k, piv);
        }
        for i in (k + 1)..n {
            let f = m[(i, k)] / m[(k, k)];
            for j in k..n {
                m[(i, j)] -= f * m[(k, j)];
            }
            x[i] -= f * x[k];
        }
    }
    for k in (0..n).rev() {
        let mut acc = x[k];
        for j in (k + 1)..n {
            acc -= m[(k, j)] * x[j];
        }
        x[k] = acc / m[(k, k)];
    }
    Some(x)
}
