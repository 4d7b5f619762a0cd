//! Small dense linear algebra for the theory oracles.
//!
//! Dimensions are desk-scale (d ≤ 64), so everything is plain row-major
//! `Vec<f64>` storage with O(d³) algorithms. Tolerances are relative to
//! Frobenius norms of the inputs.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest parameter dimension accepted by problem construction.
pub const MAX_DIM: usize = 64;

const SYMMETRY_RTOL: f64 = 1e-10;
const JACOBI_RTOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;
const PIVOT_RTOL: f64 = 1e-12;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("vector must have positive length"));
        }
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("vector entries must be finite"));
        }
        Ok(DenseVector(entries))
    }

    pub fn zeros(d: usize) -> Self {
        DenseVector(vec![0.0; d])
    }

    pub fn from_fn(d: usize, f: impl FnMut(usize) -> f64) -> Self {
        DenseVector((0..d).map(f).collect())
    }

    /// Standard basis vector `e_i`.
    pub fn basis(d: usize, i: usize) -> Self {
        let mut v = Self::zeros(d);
        v.0[i] = 1.0;
        v
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &DenseVector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn scale(&self, s: f64) -> DenseVector {
        DenseVector(self.0.iter().map(|x| s * x).collect())
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &DenseVector) {
        debug_assert_eq!(self.len(), x.len());
        for (s, xi) in self.0.iter_mut().zip(&x.0) {
            *s += alpha * xi;
        }
    }

    pub fn dist_sq(&self, other: &DenseVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Outer product `self ⊗ other`.
    pub fn outer(&self, other: &DenseVector) -> DenseMatrix {
        assert_eq!(self.len(), other.len(), "outer product of unequal lengths");
        let n = self.len();
        DenseMatrix::from_fn(n, |i, j| self.0[i] * other.0[j])
    }

    /// Mean of a non-empty collection of equal-length vectors.
    pub fn mean<'a>(vs: impl IntoIterator<Item = &'a DenseVector>) -> DenseVector {
        let mut it = vs.into_iter();
        let first = it.next().expect("mean of empty collection");
        let mut acc = first.clone();
        let mut n = 1usize;
        for v in it {
            acc.axpy(1.0, v);
            n += 1;
        }
        acc.scale(1.0 / n as f64)
    }
}

impl fmt::Debug for DenseVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.0).finish()
    }
}

impl Index<usize> for DenseVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl IndexMut<usize> for DenseVector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.0[i]
    }
}

impl Add for &DenseVector {
    type Output = DenseVector;
    fn add(self, rhs: &DenseVector) -> DenseVector {
        assert_eq!(self.len(), rhs.len());
        DenseVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }
}

impl Sub for &DenseVector {
    type Output = DenseVector;
    fn sub(self, rhs: &DenseVector) -> DenseVector {
        assert_eq!(self.len(), rhs.len());
        DenseVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

impl Neg for &DenseVector {
    type Output = DenseVector;
    fn neg(self) -> DenseVector {
        self.scale(-1.0)
    }
}

impl Mul<&DenseVector> for f64 {
    type Output = DenseVector;
    fn mul(self, rhs: &DenseVector) -> DenseVector {
        rhs.scale(self)
    }
}

/// Square matrix in row-major order.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct DenseMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Self {
        DenseMatrix {
            n,
            data: vec![0.0; n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(f(i, j));
            }
        }
        DenseMatrix { n, data }
    }

    pub fn diag(entries: &[f64]) -> Self {
        Self::from_fn(entries.len(), |i, j| if i == j { entries[i] } else { 0.0 })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::invalid("matrix must be non-empty"));
        }
        let mut data = Vec::with_capacity(n * n);
        for row in rows {
            if row.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    found: row.len(),
                });
            }
            data.extend(row);
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("matrix entries must be finite"));
        }
        Ok(DenseMatrix { n, data })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n).map(|r| r.to_vec()).collect()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diagonal().iter().sum()
    }

    pub fn transpose(&self) -> DenseMatrix {
        Self::from_fn(self.n, |i, j| self.get(j, i))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Frobenius norm of `self - selfᵀ` relative to `‖self‖_F`.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.frobenius_norm();
        if scale == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                let d = self.get(i, j) - self.get(j, i);
                acc += 2.0 * d * d;
            }
        }
        acc.sqrt() / scale
    }

    pub fn is_symmetric(&self, rtol: f64) -> bool {
        self.asymmetry() <= rtol
    }

    pub fn symmetrize(&self) -> DenseMatrix {
        Self::from_fn(self.n, |i, j| 0.5 * (self.get(i, j) + self.get(j, i)))
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        DenseMatrix {
            n: self.n,
            data: self.data.iter().map(|x| s * x).collect(),
        }
    }

    /// `self += alpha * x`
    pub fn axpy(&mut self, alpha: f64, x: &DenseMatrix) {
        assert_eq!(self.n, x.n);
        for (s, xi) in self.data.iter_mut().zip(&x.data) {
            *s += alpha * xi;
        }
    }

    pub fn matmul(&self, rhs: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.n, rhs.n, "matmul dimension mismatch");
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                let row = &rhs.data[k * n..(k + 1) * n];
                for (o, r) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                    *o += a * r;
                }
            }
        }
        DenseMatrix { n, data: out }
    }

    pub fn matvec(&self, v: &DenseVector) -> DenseVector {
        assert_eq!(self.n, v.len(), "matvec dimension mismatch");
        DenseVector::from_fn(self.n, |i| {
            self.data[i * self.n..(i + 1) * self.n]
                .iter()
                .zip(v.iter())
                .map(|(a, b)| a * b)
                .sum()
        })
    }

    /// Mean of a non-empty collection of equal-size matrices.
    pub fn mean<'a>(ms: impl IntoIterator<Item = &'a DenseMatrix>) -> DenseMatrix {
        let mut it = ms.into_iter();
        let first = it.next().expect("mean of empty collection");
        let mut acc = first.clone();
        let mut n = 1usize;
        for m in it {
            acc.axpy(1.0, m);
            n += 1;
        }
        acc.scale(1.0 / n as f64)
    }

    /// Spectral norm of a symmetric matrix.
    pub fn sym_spectral_norm(&self) -> Result<f64> {
        let eig = sym_eigen(self)?;
        Ok(eig.values.iter().fold(0.0_f64, |m, l| m.max(l.abs())))
    }
}

impl TryFrom<Vec<Vec<f64>>> for DenseMatrix {
    type Error = Error;
    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        DenseMatrix::from_rows(rows)
    }
}

impl From<DenseMatrix> for Vec<Vec<f64>> {
    fn from(m: DenseMatrix) -> Self {
        m.rows()
    }
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.data.chunks(self.n)).finish()
    }
}

impl Add for &DenseMatrix {
    type Output = DenseMatrix;
    fn add(self, rhs: &DenseMatrix) -> DenseMatrix {
        let mut out = self.clone();
        out.axpy(1.0, rhs);
        out
    }
}

impl Sub for &DenseMatrix {
    type Output = DenseMatrix;
    fn sub(self, rhs: &DenseMatrix) -> DenseMatrix {
        let mut out = self.clone();
        out.axpy(-1.0, rhs);
        out
    }
}

impl Mul for &DenseMatrix {
    type Output = DenseMatrix;
    fn mul(self, rhs: &DenseMatrix) -> DenseMatrix {
        self.matmul(rhs)
    }
}

impl Mul<&DenseVector> for &DenseMatrix {
    type Output = DenseVector;
    fn mul(self, rhs: &DenseVector) -> DenseVector {
        self.matvec(rhs)
    }
}

/// Fully symmetric order-3 tensor, stored densely.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct SymTensor3 {
    n: usize,
    data: Vec<f64>,
}

impl SymTensor3 {
    pub fn zeros(n: usize) -> Self {
        SymTensor3 {
            n,
            data: vec![0.0; n * n * n],
        }
    }

    /// Builds a tensor from an entry function. The result is only symmetric
    /// if `f` is; check with [`SymTensor3::is_symmetric`].
    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(n * n * n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    data.push(f(i, j, k));
                }
            }
        }
        SymTensor3 { n, data }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.n + j) * self.n + k]
    }

    /// `self += w · x⊗x⊗x`
    pub fn add_cube(&mut self, w: f64, x: &DenseVector) {
        assert_eq!(self.n, x.len());
        let n = self.n;
        for i in 0..n {
            let wi = w * x[i];
            for j in 0..n {
                let wij = wi * x[j];
                for k in 0..n {
                    self.data[(i * n + j) * n + k] += wij * x[k];
                }
            }
        }
    }

    pub fn axpy(&mut self, alpha: f64, x: &SymTensor3) {
        assert_eq!(self.n, x.n);
        for (s, xi) in self.data.iter_mut().zip(&x.data) {
            *s += alpha * xi;
        }
    }

    pub fn scale(&self, s: f64) -> SymTensor3 {
        SymTensor3 {
            n: self.n,
            data: self.data.iter().map(|x| s * x).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_symmetric(&self, rtol: f64) -> bool {
        let scale = self.norm().max(f64::MIN_POSITIVE);
        let n = self.n;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let v = self.get(i, j, k);
                    for w in [
                        self.get(i, k, j),
                        self.get(j, i, k),
                        self.get(j, k, i),
                        self.get(k, i, j),
                        self.get(k, j, i),
                    ] {
                        if (v - w).abs() > rtol * scale {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

impl fmt::Debug for SymTensor3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SymTensor3")
            .field("n", &self.n)
            .field("data", &self.data)
            .finish()
    }
}

/// Eigendecomposition `m = Q diag(values) Qᵀ`; eigenvectors are the columns
/// of `vectors`, values sorted ascending.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: DenseMatrix,
}

impl SymEigen {
    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// Rebuilds `Q diag(f(λ)) Qᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        let n = self.values.len();
        let q = &self.vectors;
        let fl: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        DenseMatrix::from_fn(n, |i, j| {
            (0..n).map(|k| q.get(i, k) * fl[k] * q.get(j, k)).sum()
        })
    }
}

fn check_symmetric(m: &DenseMatrix) -> Result<()> {
    let asym = m.asymmetry();
    if asym > SYMMETRY_RTOL {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Stops once the off-diagonal Frobenius mass drops below `1e-12·‖m‖_F`.
pub fn sym_eigen(m: &DenseMatrix) -> Result<SymEigen> {
    check_symmetric(m)?;
    let n = m.dim();
    let mut a = m.symmetrize();
    let mut v = DenseMatrix::identity(n);
    let scale = a.frobenius_norm();
    if scale == 0.0 {
        return Ok(SymEigen {
            values: vec![0.0; n],
            vectors: v,
        });
    }

    let off = |a: &DenseMatrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a.get(i, j) * a.get(i, j);
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    while off(&a) > JACOBI_RTOL * scale {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                iterations: sweeps,
                last_step: off(&a),
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(i, i).total_cmp(&a.get(j, j)));
    let values = order.iter().map(|&i| a.get(i, i)).collect();
    let vectors = DenseMatrix::from_fn(n, |i, j| v.get(i, order[j]));
    Ok(SymEigen { values, vectors })
}

/// Solves `h·X + X·h = c` for symmetric positive-definite `h` and symmetric `c`.
///
/// This is the operator `A = (Id⊗h + h⊗Id)⁻¹` applied to `c`.
pub fn solve_lyapunov(h: &DenseMatrix, c: &DenseMatrix) -> Result<DenseMatrix> {
    if h.dim() != c.dim() {
        return Err(Error::DimensionMismatch {
            expected: h.dim(),
            found: c.dim(),
        });
    }
    check_symmetric(c)?;
    let eig = sym_eigen(h)?;
    let lmin = eig.min();
    if lmin <= 0.0 {
        return Err(Error::SingularOperator { eigenvalue: lmin });
    }
    let q = &eig.vectors;
    let qt = q.transpose();
    let rotated = qt.matmul(&c.symmetrize()).matmul(q);
    let l = &eig.values;
    let inner = DenseMatrix::from_fn(h.dim(), |i, j| rotated.get(i, j) / (l[i] + l[j]));
    Ok(q.matmul(&inner).matmul(&qt).symmetrize())
}

/// Contraction `v_i = Σ_jk t_ijk m_jk`.
pub fn contract3(t: &SymTensor3, m: &DenseMatrix) -> Result<DenseVector> {
    if t.dim() != m.dim() {
        return Err(Error::DimensionMismatch {
            expected: t.dim(),
            found: m.dim(),
        });
    }
    let n = t.dim();
    Ok(DenseVector::from_fn(n, |i| {
        let mut s = 0.0;
        for j in 0..n {
            for k in 0..n {
                s += t.get(i, j, k) * m.get(j, k);
            }
        }
        s
    }))
}

/// `m^k` by repeated multiplication; `m^0 = Id`.
pub fn matrix_power(m: &DenseMatrix, k: usize) -> DenseMatrix {
    let mut out = DenseMatrix::identity(m.dim());
    for _ in 0..k {
        out = out.matmul(m);
    }
    out
}

/// Ordered product `ms[K-1] ⋯ ms[1] · ms[0]` (later factors on the left).
pub fn ordered_product(n: usize, ms: &[DenseMatrix]) -> DenseMatrix {
    ms.iter()
        .fold(DenseMatrix::identity(n), |acc, m| m.matmul(&acc))
}

/// Gaussian elimination with partial pivoting.
pub fn solve_linear(a: &DenseMatrix, b: &DenseVector) -> Result<DenseVector> {
    let n = a.dim();
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: b.len(),
        });
    }
    let scale = a.max_abs();
    if scale == 0.0 {
        return Err(Error::SingularMatrix { pivot: 0.0 });
    }
    let mut m = a.data.clone();
    let mut rhs = b.as_slice().to_vec();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap();
        let pv = m[piv * n + col];
        if pv.abs() < PIVOT_RTOL * scale {
            return Err(Error::SingularMatrix { pivot: pv });
        }
        if piv != col {
            for k in 0..n {
                m.swap(col * n + k, piv * n + k);
            }
            rhs.swap(col, piv);
        }
        for row in (col + 1)..n {
            let f = m[row * n + col] / pv;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                m[row * n + k] -= f * m[col * n + k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = ((row + 1)..n).map(|k| m[row * n + k] * x[k]).sum();
        x[row] = (rhs[row] - s) / m[row * n + row];
    }
    Ok(DenseVector(x))
}

/// Gauss–Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre_unit(order: usize) -> Vec<(f64, f64)> {
    let n = order;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        // Chebyshev-like initial guess, refined by Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else { p1 };
            let pn1 = if n == 0 { 0.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push((0.5 * (1.0 - x), 0.5 * w));
    }
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_matrix(rng: &mut StdRng, n: usize) -> DenseMatrix {
        DenseMatrix::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_spd(rng: &mut StdRng, n: usize) -> DenseMatrix {
        let b = random_matrix(rng, n);
        let mut h = b.transpose().matmul(&b);
        h.axpy(0.5, &DenseMatrix::identity(n));
        h
    }

    fn random_sym(rng: &mut StdRng, n: usize) -> DenseMatrix {
        random_matrix(rng, n).symmetrize()
    }

    fn lyapunov_residual(h: &DenseMatrix, x: &DenseMatrix, c: &DenseMatrix) -> f64 {
        let mut r = h.matmul(x);
        r.axpy(1.0, &x.matmul(h));
        r.axpy(-1.0, c);
        r.frobenius_norm()
    }

    #[test]
    fn lyapunov_identity() {
        let i2 = DenseMatrix::identity(2);
        let x = solve_lyapunov(&i2, &i2).unwrap();
        assert!((&x - &i2.scale(0.5)).max_abs() < 1e-15);
    }

    #[test]
    fn lyapunov_diagonal_hessian() {
        let h = DenseMatrix::diag(&[1.0, 2.0]);
        let c = DenseMatrix::from_fn(2, |_, _| 1.0);
        let x = solve_lyapunov(&h, &c).unwrap();
        let expect = DenseMatrix::from_rows(vec![vec![0.5, 1.0 / 3.0], vec![1.0 / 3.0, 0.25]]).unwrap();
        assert!((&x - &expect).max_abs() < 1e-14);
        assert!(lyapunov_residual(&h, &x, &c) <= 1e-10 * c.frobenius_norm());
    }

    #[test]
    fn lyapunov_random_5x5() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let h = random_spd(&mut rng, 5);
            let c = random_sym(&mut rng, 5);
            let x = solve_lyapunov(&h, &c).unwrap();
            assert!(lyapunov_residual(&h, &x, &c) <= 1e-10 * c.frobenius_norm());
            assert!(x.asymmetry() < 1e-14);
        }
    }

    #[test]
    fn lyapunov_errors() {
        let h = DenseMatrix::from_rows(vec![vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        let c = DenseMatrix::identity(2);
        assert!(matches!(solve_lyapunov(&h, &c), Err(Error::NotSymmetric { .. })));
        assert!(matches!(solve_lyapunov(&c, &h), Err(Error::NotSymmetric { .. })));
        let h = DenseMatrix::diag(&[1.0, 0.0]);
        assert!(matches!(solve_lyapunov(&h, &c), Err(Error::SingularOperator { .. })));
        let h = DenseMatrix::diag(&[1.0, -2.0]);
        assert!(matches!(solve_lyapunov(&h, &c), Err(Error::SingularOperator { .. })));
    }

    #[test]
    fn jacobi_reconstructs() {
        let mut rng = StdRng::seed_from_u64(3);
        for n in [1, 2, 3, 7, 12] {
            let m = random_sym(&mut rng, n);
            let eig = sym_eigen(&m).unwrap();
            let back = eig.map(|l| l);
            assert!((&back - &m).frobenius_norm() < 1e-12 * m.frobenius_norm().max(1.0));
            let qtq = eig.vectors.transpose().matmul(&eig.vectors);
            assert!((&qtq - &DenseMatrix::identity(n)).max_abs() < 1e-12);
            assert!(eig.values.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn contract3_examples() {
        let t = SymTensor3::zeros(3);
        let m = DenseMatrix::identity(3);
        assert_eq!(contract3(&t, &m).unwrap(), DenseVector::zeros(3));

        let t = SymTensor3::from_fn(1, |_, _, _| 2.0);
        let m = DenseMatrix::diag(&[0.3]);
        let v = contract3(&t, &m).unwrap();
        assert!((v[0] - 0.6).abs() < 1e-15);

        assert!(matches!(
            contract3(&SymTensor3::zeros(2), &DenseMatrix::identity(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn matrix_power_examples() {
        let i3 = DenseMatrix::identity(3);
        assert_eq!(matrix_power(&i3, 7), i3);
        let m = DenseMatrix::diag(&[0.9, 0.9]);
        let p = matrix_power(&m, 10);
        assert!((p.get(0, 0) - 0.9f64.powi(10)).abs() < 1e-15);
        assert!((p.get(0, 0) - 0.34868).abs() < 1e-5);
        let s = DenseMatrix::from_rows(vec![vec![0.5, 0.2], vec![0.2, 0.3]]).unwrap();
        let triple = s.matmul(&s).matmul(&s);
        assert!((&matrix_power(&s, 3) - &triple).max_abs() < 1e-15);
        assert_eq!(matrix_power(&s, 0), DenseMatrix::identity(2));
    }

    #[test]
    fn solve_linear_examples() {
        let v = DenseVector::new(vec![1.0, -2.0, 3.5]).unwrap();
        assert_eq!(solve_linear(&DenseMatrix::identity(3), &v).unwrap(), v);
        let a = DenseMatrix::diag(&[2.0, 4.0]);
        let x = solve_linear(&a, &DenseVector::new(vec![2.0, 4.0]).unwrap()).unwrap();
        assert_eq!(x.as_slice(), &[1.0, 1.0]);

        let mut rng = StdRng::seed_from_u64(5);
        let mut a = random_matrix(&mut rng, 6);
        a.axpy(4.0, &DenseMatrix::identity(6));
        let b = DenseVector::from_fn(6, |_| rng.random_range(-1.0..1.0));
        let x = solve_linear(&a, &b).unwrap();
        assert!((&a.matvec(&x) - &b).norm() < 1e-10);

        let sing = DenseMatrix::from_rows(vec![vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(
            solve_linear(&sing, &DenseVector::new(vec![1.0, 1.0]).unwrap()),
            Err(Error::SingularMatrix { .. })
        ));
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let rule = gauss_legendre_unit(16);
        assert_eq!(rule.len(), 16);
        let wsum: f64 = rule.iter().map(|(_, w)| w).sum();
        assert!((wsum - 1.0).abs() < 1e-14);
        // exact up to degree 31
        for deg in [1, 5, 17, 31] {
            let q: f64 = rule.iter().map(|(x, w)| w * x.powi(deg)).sum();
            assert!((q - 1.0 / (deg as f64 + 1.0)).abs() < 1e-14, "deg {deg}");
        }
    }

    #[test]
    fn vector_constructor_rejects_bad_input() {
        assert!(DenseVector::new(vec![]).is_err());
        assert!(DenseVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(DenseMatrix::from_rows(vec![vec![1.0, 2.0]]).is_err());
    }

    /// Telescoping: Π M_k − Π M'_k = Σ_k (Π_{j>k} M_j)(M_k − M'_k)(Π_{j<k} M'_j).
    #[test]
    fn telescoping_product_identity() {
        let mut rng = StdRng::seed_from_u64(99);
        for _ in 0..50 {
            let d = rng.random_range(1..=4);
            let k = rng.random_range(1..=6);
            let ms: Vec<_> = (0..k).map(|_| random_matrix(&mut rng, d)).collect();
            let mps: Vec<_> = (0..k).map(|_| random_matrix(&mut rng, d)).collect();
            let lhs = &ordered_product(d, &ms) - &ordered_product(d, &mps);
            let mut rhs = DenseMatrix::zeros(d);
            for i in 0..k {
                let left = ordered_product(d, &ms[i + 1..]);
                let right = ordered_product(d, &mps[..i]);
                rhs.axpy(1.0, &left.matmul(&(&ms[i] - &mps[i])).matmul(&right));
            }
            assert!((&lhs - &rhs).max_abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn contract3_is_linear(
            seed in any::<u64>(),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
            d in 1usize..5,
        ) {
            let mut rng = StdRng::seed_from_u64(seed);
            let mut t = SymTensor3::zeros(d);
            for _ in 0..3 {
                let x = DenseVector::from_fn(d, |_| rng.random_range(-1.0..1.0));
                t.add_cube(rng.random_range(-1.0..1.0), &x);
            }
            prop_assert!(t.is_symmetric(1e-10));
            let m1 = random_sym(&mut rng, d);
            let m2 = random_sym(&mut rng, d);
            let mut comb = m1.scale(alpha);
            comb.axpy(beta, &m2);
            let lhs = contract3(&t, &comb).unwrap();
            let mut rhs = contract3(&t, &m1).unwrap().scale(alpha);
            rhs.axpy(beta, &contract3(&t, &m2).unwrap());
            prop_assert!((&lhs - &rhs).norm() <= 1e-12 * (1.0 + rhs.norm()));
        }

        #[test]
        fn matrix_power_adds_exponents(seed in any::<u64>(), j in 0usize..6, k in 0usize..6, d in 1usize..5) {
            let mut rng = StdRng::seed_from_u64(seed);
            let m = random_matrix(&mut rng, d);
            let lhs = matrix_power(&m, j + k);
            let rhs = matrix_power(&m, j).matmul(&matrix_power(&m, k));
            prop_assert!((&lhs - &rhs).frobenius_norm() <= 1e-10 * lhs.frobenius_norm().max(1.0));
        }

        #[test]
        fn lyapunov_residual_small(seed in any::<u64>(), d in 1usize..7) {
            let mut rng = StdRng::seed_from_u64(seed);
            let h = random_spd(&mut rng, d);
            let c = random_sym(&mut rng, d);
            let x = solve_lyapunov(&h, &c).unwrap();
            prop_assert!(lyapunov_residual(&h, &x, &c) <= 1e-10 * c.frobenius_norm().max(f64::MIN_POSITIVE));
            prop_assert!(x.is_symmetric(1e-12));
        }
    }
}
