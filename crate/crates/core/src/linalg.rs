//! Banded LU with partial pivoting, sparse row matrices and minimum-norm solves.
//!
//! Lattice operators with natural ordering have bandwidth `N^{n-1}`, so a band
//! factorization is exact (no fill outside the band) and fast enough for the
//! 17³ grids used here.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

use num_complex::Complex64;

use crate::error::{LabError, Result};

pub trait Scalar:
    Copy
    + Debug
    + PartialEq
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn from_real(x: f64) -> Self;
    fn conjugate(self) -> Self;
    fn modulus(self) -> f64;
    fn real_part(self) -> f64;
    fn to_complex(self) -> Complex64;
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_real(x: f64) -> Self {
        x
    }
    fn conjugate(self) -> Self {
        self
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
    fn real_part(self) -> f64 {
        self
    }
    fn to_complex(self) -> Complex64 {
        Complex64::new(self, 0.0)
    }
}

impl Scalar for Complex64 {
    const ZERO: Self = Complex64::new(0.0, 0.0);
    const ONE: Self = Complex64::new(1.0, 0.0);
    fn from_real(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
    fn conjugate(self) -> Self {
        self.conj()
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
    fn real_part(self) -> f64 {
        self.re
    }
    fn to_complex(self) -> Complex64 {
        self
    }
}

/// Square band matrix in LAPACK general-band layout with room for pivoting fill.
#[derive(Clone, Debug)]
pub struct BandMatrix<T> {
    n: usize,
    kl: usize,
    ku: usize,
    ldab: usize,
    ab: Vec<T>,
}

impl<T: Scalar> BandMatrix<T> {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let ldab = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            ldab,
            ab: vec![T::ZERO; n * ldab],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidths(&self) -> (usize, usize) {
        (self.kl, self.ku)
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> usize {
        j * self.ldab + self.kl + self.ku + i - j
    }

    pub fn in_band(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && i <= j + self.kl && j <= i + self.ku
    }

    pub fn add(&mut self, i: usize, j: usize, v: T) {
        assert!(self.in_band(i, j), "entry ({i},{j}) outside band");
        let s = self.slot(i, j);
        self.ab[s] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        if self.in_band(i, j) {
            self.ab[self.slot(i, j)]
        } else {
            T::ZERO
        }
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::ZERO; self.n];
        for j in 0..self.n {
            let lo = j.saturating_sub(self.ku);
            let hi = (j + self.kl).min(self.n - 1);
            for (i, yi) in y.iter_mut().enumerate().take(hi + 1).skip(lo) {
                *yi += self.ab[self.slot(i, j)] * x[j];
            }
        }
        y
    }

    pub fn norm1(&self) -> f64 {
        (0..self.n)
            .map(|j| {
                let lo = j.saturating_sub(self.ku);
                let hi = (j + self.kl).min(self.n - 1);
                (lo..=hi).map(|i| self.ab[self.slot(i, j)].modulus()).sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// LU factorization with partial pivoting (the `gbtf2` recurrence).
    pub fn factor(mut self) -> Result<BandLu<T>> {
        let n = self.n;
        let kl = self.kl;
        let kv = self.kl + self.ku;
        let ldab = self.ldab;
        let norm1 = self.norm1();
        let mut ipiv = vec![0usize; n];
        let mut ju = 0usize;
        let at = |r: usize, c: usize| c * ldab + kv + r - c;
        for j in 0..n {
            let km = kl.min(n - 1 - j);
            let mut jp = 0;
            let mut best = -1.0;
            for p in 0..=km {
                let m = self.ab[at(j + p, j)].modulus();
                if m > best {
                    best = m;
                    jp = p;
                }
            }
            ipiv[j] = j + jp;
            if best <= 0.0 || !best.is_finite() {
                return Err(LabError::IllConditioned {
                    condition: f64::INFINITY,
                });
            }
            ju = ju.max((j + self.ku + jp).min(n - 1));
            if jp != 0 {
                for c in j..=ju {
                    self.ab.swap(at(j, c), at(j + jp, c));
                }
            }
            let pivot = self.ab[at(j, j)];
            for p in 1..=km {
                self.ab[at(j + p, j)] /= pivot;
            }
            for c in j + 1..=ju {
                let t = self.ab[at(j, c)];
                if t == T::ZERO {
                    continue;
                }
                for p in 1..=km {
                    let l = self.ab[at(j + p, j)];
                    self.ab[at(j + p, c)] -= l * t;
                }
            }
        }
        Ok(BandLu {
            n,
            kl,
            kv,
            ldab,
            ab: self.ab,
            ipiv,
            norm1,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BandLu<T> {
    n: usize,
    kl: usize,
    kv: usize,
    ldab: usize,
    ab: Vec<T>,
    ipiv: Vec<usize>,
    norm1: f64,
}

impl<T: Scalar> BandLu<T> {
    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> T {
        self.ab[c * self.ldab + self.kv + r - c]
    }

    pub fn solve_in_place(&self, b: &mut [T]) {
        let n = self.n;
        for j in 0..n {
            let km = self.kl.min(n - 1 - j);
            let p = self.ipiv[j];
            if p != j {
                b.swap(j, p);
            }
            let bj = b[j];
            if bj != T::ZERO {
                for q in 1..=km {
                    b[j + q] -= self.at(j + q, j) * bj;
                }
            }
        }
        for j in (0..n).rev() {
            b[j] /= self.at(j, j);
            let bj = b[j];
            if bj != T::ZERO {
                for i in j.saturating_sub(self.kv)..j {
                    b[i] -= self.at(i, j) * bj;
                }
            }
        }
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let mut x = b.to_vec();
        self.solve_in_place(&mut x);
        x
    }

    /// Solves `Aᴴ x = b`.
    pub fn solve_adjoint_in_place(&self, b: &mut [T]) {
        let n = self.n;
        for j in 0..n {
            let mut s = b[j];
            for i in j.saturating_sub(self.kv)..j {
                s -= self.at(i, j).conjugate() * b[i];
            }
            b[j] = s / self.at(j, j).conjugate();
        }
        for j in (0..n.saturating_sub(1)).rev() {
            let km = self.kl.min(n - 1 - j);
            let mut s = b[j];
            for q in 1..=km {
                s -= self.at(j + q, j).conjugate() * b[j + q];
            }
            b[j] = s;
            let p = self.ipiv[j];
            if p != j {
                b.swap(j, p);
            }
        }
    }

    /// Estimate of the 1-norm condition number (Hager's method with Higham's
    /// alternating-sign safeguard).
    pub fn condition_estimate(&self) -> f64 {
        let n = self.n;
        if n == 0 {
            return 1.0;
        }
        let mut x = vec![T::from_real(1.0 / n as f64); n];
        let mut est = 0.0;
        let mut last_j = usize::MAX;
        for iter in 0..5 {
            self.solve_in_place(&mut x);
            let new_est: f64 = x.iter().map(|v| v.modulus()).sum();
            if iter > 0 && new_est <= est {
                break;
            }
            est = new_est;
            let mut xi: Vec<T> = x
                .iter()
                .map(|&v| {
                    let m = v.modulus();
                    if m > 0.0 {
                        v / T::from_real(m)
                    } else {
                        T::ONE
                    }
                })
                .collect();
            self.solve_adjoint_in_place(&mut xi);
            let (j, zmax) = xi
                .iter()
                .enumerate()
                .map(|(i, v)| (i, v.modulus()))
                .fold((0, -1.0), |acc, c| if c.1 > acc.1 { c } else { acc });
            if j == last_j || (iter > 0 && zmax <= xi[last_j].modulus()) {
                break;
            }
            last_j = j;
            x = vec![T::ZERO; n];
            x[j] = T::ONE;
        }
        let mut alt: Vec<T> = (0..n)
            .map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                let d = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
                T::from_real(s * (1.0 + d))
            })
            .collect();
        self.solve_in_place(&mut alt);
        let alt_est = 2.0 * alt.iter().map(|v| v.modulus()).sum::<f64>() / (3.0 * n as f64);
        est.max(alt_est) * self.norm1
    }
}

/// Row-compressed sparse matrix built from per-row entry lists.
#[derive(Clone, Debug)]
pub struct SparseRows<T> {
    pub ncols: usize,
    pub rows: Vec<Vec<(usize, T)>>,
}

impl<T: Scalar> SparseRows<T> {
    pub fn new(ncols: usize) -> Self {
        Self {
            ncols,
            rows: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn push_row(&mut self, mut entries: Vec<(usize, T)>) {
        entries.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, T)> = Vec::with_capacity(entries.len());
        for (c, v) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == c => last.1 += v,
                _ => merged.push((c, v)),
            }
        }
        self.rows.push(merged);
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        self.rows
            .iter()
            .map(|r| r.iter().fold(T::ZERO, |acc, &(c, v)| acc + v * x[c]))
            .collect()
    }

    pub fn adjoint_matvec(&self, y: &[T]) -> Vec<T> {
        let mut x = vec![T::ZERO; self.ncols];
        for (r, &yr) in self.rows.iter().zip(y) {
            for &(c, v) in r {
                x[c] += v.conjugate() * yr;
            }
        }
        x
    }

    /// Band form of a square matrix.
    pub fn to_band(&self) -> BandMatrix<T> {
        assert_eq!(self.nrows(), self.ncols, "square matrix required");
        let (mut kl, mut ku) = (0, 0);
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, _) in r {
                if i > j {
                    kl = kl.max(i - j);
                } else {
                    ku = ku.max(j - i);
                }
            }
        }
        let mut b = BandMatrix::zeros(self.ncols, kl, ku);
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, v) in r {
                b.add(i, j, v);
            }
        }
        b
    }

    /// Band form of `A Aᴴ`.
    pub fn gram_band(&self) -> BandMatrix<T> {
        let m = self.nrows();
        let mut by_col: Vec<Vec<(usize, T)>> = vec![Vec::new(); self.ncols];
        for (i, r) in self.rows.iter().enumerate() {
            for &(c, v) in r {
                by_col[c].push((i, v));
            }
        }
        let mut bw = 0;
        for col in &by_col {
            if let (Some(first), Some(last)) = (col.first(), col.last()) {
                bw = bw.max(last.0 - first.0);
            }
        }
        let mut g = BandMatrix::zeros(m, bw, bw);
        for col in &by_col {
            for &(i, vi) in col {
                for &(k, vk) in col {
                    g.add(i, k, vi * vk.conjugate());
                }
            }
        }
        g
    }
}

/// Minimum-norm solution of an underdetermined consistent system `A x = b`
/// via the normal equations of the second kind, `A Aᴴ z = b`, `x = Aᴴ z`.
#[derive(Clone, Debug)]
pub struct MinNormSolution<T> {
    pub x: Vec<T>,
    pub relative_residual: f64,
    pub condition: f64,
}

pub fn min_norm_solve<T: Scalar>(a: &SparseRows<T>, b: &[T]) -> Result<MinNormSolution<T>> {
    let lu = a.gram_band().factor()?;
    let condition = lu.condition_estimate();
    let z = lu.solve(b);
    let x = a.adjoint_matvec(&z);
    let ax = a.matvec(&x);
    let bn = norm2(b);
    let rn = ax
        .iter()
        .zip(b)
        .map(|(p, q)| (*p - *q).modulus().powi(2))
        .sum::<f64>()
        .sqrt();
    let relative_residual = if bn > 0.0 { rn / bn } else { rn };
    if !relative_residual.is_finite() || relative_residual > 1e-6 {
        return Err(LabError::Infeasible {
            residual: relative_residual,
        });
    }
    Ok(MinNormSolution {
        x,
        relative_residual,
        condition,
    })
}

pub fn norm2<T: Scalar>(v: &[T]) -> f64 {
    v.iter().map(|x| x.modulus().powi(2)).sum::<f64>().sqrt()
}

/// Largest singular value of a dense row-major `m × n` matrix by power
/// iteration on `AᴴA`.
pub fn spectral_norm(a: &[Complex64], m: usize, n: usize, iterations: usize) -> f64 {
    if m == 0 || n == 0 {
        return 0.0;
    }
    let mut x: Vec<Complex64> = (0..n)
        .map(|j| Complex64::new(1.0 + 0.1 * ((j * 7919) % 13) as f64, 0.0))
        .collect();
    let mut sigma = 0.0;
    for _ in 0..iterations {
        let xn = norm2(&x);
        if xn == 0.0 {
            return 0.0;
        }
        x.iter_mut().for_each(|v| *v /= xn);
        let y: Vec<Complex64> = (0..m)
            .map(|i| {
                let row = &a[i * n..(i + 1) * n];
                row.iter().zip(&x).map(|(p, q)| p * q).sum()
            })
            .collect();
        let mut z = vec![Complex64::new(0.0, 0.0); n];
        for (i, yi) in y.iter().enumerate() {
            let row = &a[i * n..(i + 1) * n];
            for (zj, aij) in z.iter_mut().zip(row) {
                *zj += aij.conj() * yi;
            }
        }
        let next = norm2(&y);
        let converged = (next - sigma).abs() <= 1e-12 * next;
        sigma = next;
        x = z;
        if converged {
            break;
        }
    }
    sigma
}
