//! Small dense complex and real matrices with the handful of kernels the
//! simulator needs: products, LU with partial pivoting (plain and transposed
//! solves), and a Hermitian Jacobi eigensolver.

use std::ops::{Index, IndexMut};

use num_complex::Complex;
use num_traits::{One, Zero};

use crate::error::{Error, Result};
use crate::scalar::{Real, C};

/// Row-major dense complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMat<T: Real> {
    rows: usize,
    cols: usize,
    data: Vec<C<T>>,
}

impl<T: Real> CMat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C<T>) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds from row-major data.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<C<T>>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[C<T>] {
        &self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[C<T>] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [C<T>] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<C<T>> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn scale(&self, s: C<T>) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&z| z * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch(format!(
                "add {:?} + {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "matmul {:?} * {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let out_row = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &a) in self.row(r).iter().enumerate() {
                if a.is_zero() {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Copies the `rows x cols` block starting at `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |r, c| self[(r0 + r, c0 + c)])
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|z| z.is_zero())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, z| m.max(z.norm()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((a - b).norm()))
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt()
    }

    pub fn trace(&self) -> C<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }
}

impl<T: Real> Index<(usize, usize)> for CMat<T> {
    type Output = C<T>;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &C<T> {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T: Real> IndexMut<(usize, usize)> for CMat<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C<T> {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Row-major dense real matrix (phase matrices, gradients, velocities).
#[derive(Debug, Clone, PartialEq)]
pub struct RMat<T: Real> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> RMat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Element-wise `f(self, other)`; shapes must agree.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape(), other.shape(), "shape mismatch in zip_map");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl<T: Real> Index<(usize, usize)> for RMat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl<T: Real> IndexMut<(usize, usize)> for RMat<T> {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// LU factorization `P A = L U` with partial pivoting.
#[derive(Debug, Clone)]
pub struct Lu<T: Real> {
    n: usize,
    lu: Vec<C<T>>,
    perm: Vec<usize>,
    swaps: usize,
    pivot_ratio: T,
}

impl<T: Real> Lu<T> {
    /// Factors a square matrix. `cond_cap` bounds the pivot-magnitude ratio
    /// used as a cheap conditioning estimate.
    pub fn factor(a: &CMat<T>, cond_cap: T) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::DimensionMismatch(format!(
                "LU of non-square {:?}",
                a.shape()
            )));
        }
        let mut lu = a.data.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut swaps = 0;
        for k in 0..n {
            let mut best = k;
            let mut best_mag = lu[k * n + k].norm_sqr();
            for r in k + 1..n {
                let mag = lu[r * n + k].norm_sqr();
                if mag > best_mag {
                    best = r;
                    best_mag = mag;
                }
            }
            if best_mag.is_zero() || !best_mag.is_finite() {
                return Err(Error::SingularSystem(format!("zero pivot in column {k}")));
            }
            if best != k {
                for c in 0..n {
                    lu.swap(k * n + c, best * n + c);
                }
                perm.swap(k, best);
                swaps += 1;
            }
            let inv_pivot = lu[k * n + k].inv();
            for r in k + 1..n {
                let factor = lu[r * n + k] * inv_pivot;
                lu[r * n + k] = factor;
                if factor.is_zero() {
                    continue;
                }
                let (upper, lower) = lu.split_at_mut(r * n);
                let pivot_row = &upper[k * n + k + 1..k * n + n];
                for (x, &p) in lower[k + 1..n].iter_mut().zip(pivot_row) {
                    *x -= factor * p;
                }
            }
        }
        let (mut lo, mut hi) = (T::infinity(), T::zero());
        for k in 0..n {
            let mag = lu[k * n + k].norm();
            lo = lo.min(mag);
            hi = hi.max(mag);
        }
        let pivot_ratio = if n == 0 { T::one() } else { hi / lo };
        if !(pivot_ratio <= cond_cap) {
            return Err(Error::SingularSystem(format!(
                "condition estimate {:e} exceeds cap {:e}",
                pivot_ratio.to_f64_lossy(),
                cond_cap.to_f64_lossy()
            )));
        }
        Ok(Self {
            n,
            lu,
            perm,
            swaps,
            pivot_ratio,
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Ratio of largest to smallest pivot magnitude.
    #[inline]
    pub fn condition_estimate(&self) -> T {
        self.pivot_ratio
    }

    pub fn determinant(&self) -> C<T> {
        let mut det: C<T> = (0..self.n).map(|k| self.lu[k * self.n + k]).product();
        if self.swaps % 2 == 1 {
            det = -det;
        }
        det
    }

    /// Solves `A X = B` for a block of right-hand sides.
    pub fn solve(&self, b: &CMat<T>) -> Result<CMat<T>> {
        let n = self.n;
        self.check_rhs(b)?;
        let k = b.cols();
        let mut x = CMat::zeros(n, k);
        for i in 0..n {
            x.row_mut(i).copy_from_slice(b.row(self.perm[i]));
        }
        // L y = P b (unit lower)
        for i in 0..n {
            for j in 0..i {
                let l = self.lu[i * n + j];
                if l.is_zero() {
                    continue;
                }
                let (head, tail) = x.data.split_at_mut(i * k);
                for (xi, &xj) in tail[..k].iter_mut().zip(&head[j * k..(j + 1) * k]) {
                    *xi -= l * xj;
                }
            }
        }
        // U x = y
        for i in (0..n).rev() {
            for j in i + 1..n {
                let u = self.lu[i * n + j];
                if u.is_zero() {
                    continue;
                }
                let (head, tail) = x.data.split_at_mut(j * k);
                for (xi, &xj) in head[i * k..(i + 1) * k].iter_mut().zip(&tail[..k]) {
                    *xi -= u * xj;
                }
            }
            let inv = self.lu[i * n + i].inv();
            for xi in x.row_mut(i) {
                *xi *= inv;
            }
        }
        Ok(x)
    }

    /// Solves `Aᵀ X = B` with the same factorization.
    pub fn solve_transpose(&self, b: &CMat<T>) -> Result<CMat<T>> {
        let n = self.n;
        self.check_rhs(b)?;
        let k = b.cols();
        let mut z = b.clone();
        // Uᵀ y = b (lower, non-unit)
        for i in 0..n {
            for j in 0..i {
                let u = self.lu[j * n + i];
                if u.is_zero() {
                    continue;
                }
                let (head, tail) = z.data.split_at_mut(i * k);
                for (zi, &zj) in tail[..k].iter_mut().zip(&head[j * k..(j + 1) * k]) {
                    *zi -= u * zj;
                }
            }
            let inv = self.lu[i * n + i].inv();
            for zi in z.row_mut(i) {
                *zi *= inv;
            }
        }
        // Lᵀ w = y (upper, unit)
        for i in (0..n).rev() {
            for j in i + 1..n {
                let l = self.lu[j * n + i];
                if l.is_zero() {
                    continue;
                }
                let (head, tail) = z.data.split_at_mut(j * k);
                for (zi, &zj) in head[i * k..(i + 1) * k].iter_mut().zip(&tail[..k]) {
                    *zi -= l * zj;
                }
            }
        }
        // P x = w
        let mut x = CMat::zeros(n, k);
        for i in 0..n {
            x.row_mut(self.perm[i]).copy_from_slice(z.row(i));
        }
        Ok(x)
    }

    fn check_rhs(&self, b: &CMat<T>) -> Result<()> {
        if b.rows() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "rhs has {} rows, system has {}",
                b.rows(),
                self.n
            )));
        }
        Ok(())
    }
}

/// Columns `first..first+count` of the identity of size `n`.
pub fn identity_columns<T: Real>(n: usize, first: usize, count: usize) -> CMat<T> {
    let mut e = CMat::zeros(n, count);
    for j in 0..count {
        e[(first + j, j)] = C::one();
    }
    e
}

/// Eigendecomposition `A = U diag(λ) Uᴴ` of a Hermitian matrix by cyclic
/// complex Jacobi rotations. Eigenvalues are returned in ascending order.
pub fn hermitian_eig<T: Real>(a: &CMat<T>) -> Result<(Vec<T>, CMat<T>)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::DimensionMismatch(format!(
            "eig of non-square {:?}",
            a.shape()
        )));
    }
    let mut m = a.clone();
    let mut u = CMat::identity(n);
    let scale = a.frobenius();
    let tol = T::epsilon() * scale;
    for _sweep in 0..100 {
        let mut off = T::zero();
        for p in 0..n {
            for q in p + 1..n {
                off += m[(p, q)].norm_sqr();
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let b = m[(p, q)];
                let b_abs = b.norm();
                if b_abs <= tol * T::lit(1e-3) {
                    continue;
                }
                let phase = b / b_abs; // e^{jα}
                let app = m[(p, p)].re;
                let aqq = m[(q, q)].re;
                let tau = (aqq - app) / (b_abs + b_abs);
                let sgn = if tau >= T::zero() { T::one() } else { -T::one() };
                let t = -sgn / (tau.abs() + (T::one() + tau * tau).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = t * c;
                let cc = Complex::new(c, T::zero());
                let s_pos = phase * s; // s e^{jα}
                let s_neg = phase.conj() * s; // s e^{-jα}
                // M <- M U
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = mkp * cc + mkq * s_neg;
                    m[(k, q)] = -mkp * s_pos + mkq * cc;
                }
                // M <- Uᴴ M
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = mpk * cc + mqk * s_pos;
                    m[(q, k)] = -mpk * s_neg + mqk * cc;
                }
                m[(p, q)] = C::zero();
                m[(q, p)] = C::zero();
                for k in 0..n {
                    let ukp = u[(k, p)];
                    let ukq = u[(k, q)];
                    u[(k, p)] = ukp * cc + ukq * s_neg;
                    u[(k, q)] = -ukp * s_pos + ukq * cc;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        m[(i, i)]
            .re
            .partial_cmp(&m[(j, j)].re)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let vals = order.iter().map(|&i| m[(i, i)].re).collect();
    let vecs = CMat::from_fn(n, n, |r, c| u[(r, order[c])]);
    Ok((vals, vecs))
}
