//! Dense row-major matrices, one-sided Jacobi SVD, energy-based truncation and
//! the entropy of a singular-value spectrum.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Maximum number of Jacobi sweeps before giving up.
pub const MAX_SWEEPS: usize = 100;
/// Relative orthogonality tolerance used as the Jacobi convergence test.
pub const JACOBI_TOL: f64 = 1e-12;

/// Row-major dense matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build a matrix from row-major data, rejecting empty shapes, length
    /// mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidInput(format!(
                "matrix shape must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite entry at flat index {pos}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix shape must be positive");
        Self {
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

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// Outer product `a bᵀ`.
    pub fn outer(a: &[f64], b: &[f64]) -> Self {
        Self::from_fn(a.len(), b.len(), |i, j| a[i] * b[j])
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::InvalidInput(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · v` for a column vector `v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ · v` for a column vector `v`.
    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows, "matvec_t dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += vi * a;
            }
        }
        out
    }

    /// Multiply row `i` by `factors[i]`, i.e. `diag(factors) · self`.
    pub fn scale_rows(&self, factors: &[f64]) -> Matrix {
        assert_eq!(factors.len(), self.rows, "row scale length mismatch");
        let mut out = self.clone();
        for (i, &f) in factors.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|v| *v *= f);
        }
        out
    }

    pub fn sub(&self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.shape(), rhs.shape(), "shape mismatch in sub");
        let data = self
            .data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| a - b)
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Thin SVD `m = u · diag(sigma) · vt` with `r = min(rows, cols)` triples.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdFactors {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub vt: Matrix,
}

impl SvdFactors {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        assemble(&self.u, &self.sigma, &self.vt, self.sigma.len())
    }
}

/// Leading `k` triples of an SVD together with the fraction of squared
/// singular-value mass they retain.
#[derive(Debug, Clone, PartialEq)]
pub struct TruncatedFactors {
    pub u_star: Matrix,
    pub sigma_star: Vec<f64>,
    pub vt_star: Matrix,
    pub retained_energy_fraction: f64,
}

impl TruncatedFactors {
    pub fn retained_rank(&self) -> usize {
        self.sigma_star.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        assemble(
            &self.u_star,
            &self.sigma_star,
            &self.vt_star,
            self.sigma_star.len(),
        )
    }
}

fn assemble(u: &Matrix, sigma: &[f64], vt: &Matrix, k: usize) -> Matrix {
    let (p, q) = (u.rows(), vt.cols());
    let mut out = Matrix::zeros(p, q);
    for i in 0..p {
        let row = out.row_mut(i);
        for t in 0..k {
            let coef = u[(i, t)] * sigma[t];
            if coef == 0.0 {
                continue;
            }
            for (o, &v) in row.iter_mut().zip(vt.row(t)) {
                *o += coef * v;
            }
        }
    }
    out
}

/// Singular value decomposition by one-sided Jacobi rotations on the taller
/// orientation of `m`.
///
/// Singular values come back sorted descending. Each left singular vector is
/// sign-normalised so that its largest-magnitude entry is non-negative.
pub fn svd(m: &Matrix) -> Result<SvdFactors> {
    if let Some(pos) = m.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite entry at flat index {pos}"
        )));
    }
    let mut f = if m.rows >= m.cols {
        jacobi_tall(m)?
    } else {
        let t = jacobi_tall(&m.transpose())?;
        SvdFactors {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        }
    };
    normalize_signs(&mut f);
    Ok(f)
}

// Column-major working copy; returns factors for a p×q matrix with p ≥ q.
fn jacobi_tall(m: &Matrix) -> Result<SvdFactors> {
    let (p, q) = m.shape();
    let mut a: Vec<Vec<f64>> = (0..q).map(|j| m.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..q)
        .map(|j| {
            let mut e = vec![0.0; q];
            e[j] = 1.0;
            e
        })
        .collect();

    // Columns below this norm are rounding noise; rotating them against
    // large columns cannot reach the relative tolerance.
    let tiny = (p.max(q) as f64) * f64::EPSILON * m.frobenius_norm();
    let tiny_sq = tiny * tiny;
    let mut converged = q < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..q {
            for j in (i + 1)..q {
                let alpha = dot(&a[i], &a[i]);
                let beta = dot(&a[j], &a[j]);
                let gamma = dot(&a[i], &a[j]);
                if gamma == 0.0
                    || alpha <= tiny_sq
                    || beta <= tiny_sq
                    || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NumericalFailure(format!(
            "Jacobi SVD did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    let norms: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));

    let mut sigma = Vec::with_capacity(q);
    let mut u_cols: Vec<Option<Vec<f64>>> = Vec::with_capacity(q);
    for &j in &order {
        let s = norms[j];
        sigma.push(s);
        if s > tiny && s > 0.0 {
            u_cols.push(Some(a[j].iter().map(|x| x / s).collect()));
        } else {
            u_cols.push(None);
        }
    }
    let u_cols = complete_orthonormal(p, u_cols);

    let u = Matrix::from_fn(p, q, |i, t| u_cols[t][i]);
    let vt = Matrix::from_fn(q, q, |t, j| v[order[t]][j]);
    Ok(SvdFactors { u, sigma, vt })
}

#[inline]
fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    let (ci, cj) = (&mut left[i], &mut right[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

// Fill missing columns (zero singular values) with unit vectors orthogonal to
// the ones already present, drawn from the standard basis by Gram-Schmidt.
fn complete_orthonormal(p: usize, cols: Vec<Option<Vec<f64>>>) -> Vec<Vec<f64>> {
    if cols.iter().all(Option::is_some) {
        return cols.into_iter().map(Option::unwrap).collect();
    }
    let mut basis: Vec<Vec<f64>> = cols.iter().flatten().cloned().collect();
    let mut out = Vec::with_capacity(cols.len());
    for c in cols {
        match c {
            Some(v) => out.push(v),
            None => {
                // The mean squared residual over all unit vectors is
                // (p - |basis|) / p, so one of them clears half of it.
                let accept = 0.5 * (p - basis.len()) as f64 / p as f64;
                let mut best: Option<(f64, Vec<f64>)> = None;
                for e in 0..p {
                    let mut w = vec![0.0; p];
                    w[e] = 1.0;
                    for _ in 0..2 {
                        for b in &basis {
                            let proj = dot(&w, b);
                            w.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
                        }
                    }
                    let n = dot(&w, &w).sqrt();
                    if best.as_ref().is_none_or(|(bn, _)| n > *bn) {
                        best = Some((n, w));
                    }
                    if n * n >= accept {
                        break;
                    }
                }
                let (n, w) = best.expect("p >= 1");
                let w: Vec<f64> = w.into_iter().map(|x| x / n).collect();
                basis.push(w.clone());
                out.push(w);
            }
        }
    }
    out
}

fn normalize_signs(f: &mut SvdFactors) {
    let (p, r) = f.u.shape();
    for t in 0..r {
        let mut best = 0;
        for i in 1..p {
            if f.u[(i, t)].abs() > f.u[(best, t)].abs() {
                best = i;
            }
        }
        if f.u[(best, t)] < 0.0 {
            for i in 0..p {
                f.u[(i, t)] = -f.u[(i, t)];
            }
            f.vt.row_mut(t).iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Smallest `k` whose cumulative squared singular values exceed `threshold`
/// of the total (strict comparison). Thresholds at or above one keep every
/// triple.
pub fn select_rank(sigma: &[f64], threshold: f64) -> Result<(usize, f64)> {
    if !(threshold.is_finite() && threshold >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "energy threshold must lie in [0, 1), got {threshold}"
        )));
    }
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if total <= 0.0 {
        return Err(Error::DegenerateInput(
            "all singular values are zero".into(),
        ));
    }
    let mut cum = 0.0;
    for (k, s) in sigma.iter().enumerate() {
        cum += s * s;
        let frac = cum / total;
        if frac > threshold {
            return Ok((k + 1, frac));
        }
    }
    Ok((sigma.len(), cum / total))
}

/// Keep the minimal number of leading triples whose energy strictly exceeds
/// `threshold`.
pub fn truncate_by_energy(f: &SvdFactors, threshold: f64) -> Result<TruncatedFactors> {
    let (k, frac) = select_rank(&f.sigma, threshold)?;
    Ok(truncate_to_rank_with_fraction(f, k, frac))
}

/// Keep exactly `k` leading triples (clamped to `1..=rank`).
pub fn truncate_to_rank(f: &SvdFactors, k: usize) -> TruncatedFactors {
    let k = k.clamp(1, f.rank());
    let total: f64 = f.sigma.iter().map(|s| s * s).sum();
    let kept: f64 = f.sigma[..k].iter().map(|s| s * s).sum();
    let frac = if total > 0.0 { kept / total } else { 1.0 };
    truncate_to_rank_with_fraction(f, k, frac)
}

fn truncate_to_rank_with_fraction(f: &SvdFactors, k: usize, frac: f64) -> TruncatedFactors {
    let p = f.u.rows();
    let q = f.vt.cols();
    TruncatedFactors {
        u_star: Matrix::from_fn(p, k, |i, t| f.u[(i, t)]),
        sigma_star: f.sigma[..k].to_vec(),
        vt_star: Matrix::from_fn(k, q, |t, j| f.vt[(t, j)]),
        retained_energy_fraction: frac,
    }
}

/// Shannon entropy (nats) of the normalised squared singular values, with
/// `0 · ln 0 = 0`.
pub fn singular_entropy(sigma: &[f64]) -> Result<f64> {
    let total: f64 = sigma.iter().map(|s| s * s).sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateInput(
            "entropy of an all-zero spectrum is undefined".into(),
        ));
    }
    let e: f64 = sigma
        .iter()
        .map(|s| s * s / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(e.max(0.0))
}
