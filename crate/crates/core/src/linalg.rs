//! Dense complex linear algebra shared by the estimators, detectors and whitening.
//!
//! Matrices are small (m = 16 in every experiment), so everything is stored
//! row-major in a flat `Vec` and factorized with textbook algorithms. The only
//! outside help is the Hermitian eigensolver, borrowed from `nalgebra`.

use std::f64::consts::PI;
use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;
use num_complex::Complex;

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

/// Relative tolerance used when validating Hermitian symmetry.
pub const HERMITIAN_TOL: f64 = 1e-12;

/// Default relative eigenvalue floor for [`herm_inv_sqrt`].
pub const DEFAULT_EIG_FLOOR: f64 = 1e-12;

/// `xᴴy`.
#[inline]
pub fn dot_h(x: &[C64], y: &[C64]) -> C64 {
    x.iter().zip(y).map(|(a, b)| a.conj() * b).sum()
}

#[inline]
pub fn norm_sqr(x: &[C64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum()
}

pub fn all_finite(x: &[C64]) -> bool {
    x.iter().all(|v| v.re.is_finite() && v.im.is_finite())
}

/// Dense row-major complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "{} entries cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds `diag(values)`.
    pub fn from_real_diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = C64::new(v, 0.0);
        }
        m
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

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[C64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<C64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn adjoint(&self) -> CMatrix {
        CMatrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn mul_vec(&self, x: &[C64]) -> Result<Vec<C64>> {
        if x.len() != self.cols {
            return Err(Error::invalid(format!(
                "cannot multiply {}x{} matrix by vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn matmul(&self, rhs: &CMatrix) -> Result<CMatrix> {
        if self.cols != rhs.rows {
            return Err(Error::invalid(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = CMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                let rrow = rhs.row(k);
                let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, b) in orow.iter_mut().zip(rrow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> CMatrix {
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn sub(&self, rhs: &CMatrix) -> Result<CMatrix> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(Error::invalid("dimension mismatch in matrix difference"));
        }
        Ok(CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm_sqr(&self.data).sqrt()
    }

    /// `‖self − rhs‖_F / ‖rhs‖_F`.
    pub fn relative_frobenius_error(&self, reference: &CMatrix) -> f64 {
        let diff = self.sub(reference).expect("conformable matrices");
        diff.frobenius_norm() / reference.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    fn to_nalgebra(&self) -> DMatrix<C64> {
        DMatrix::from_fn(self.rows, self.cols, |i, j| self[(i, j)])
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = C64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Square matrix known to satisfy `A = Aᴴ`.
///
/// Construction validates symmetry to [`HERMITIAN_TOL`] (relative to the largest
/// entry) and then projects onto the exactly Hermitian part, so downstream
/// factorizations never see round-off asymmetry.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix(CMatrix);

impl HermitianMatrix {
    pub fn new(m: CMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::invalid(format!(
                "Hermitian matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        if m.rows() == 0 {
            return Err(Error::invalid("empty matrix"));
        }
        if !all_finite(m.as_slice()) {
            return Err(Error::invalid("matrix has non-finite entries"));
        }
        let n = m.rows();
        let scale = m.as_slice().iter().map(|v| v.norm()).fold(0.0, f64::max);
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in i..n {
                worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
            }
        }
        if worst > HERMITIAN_TOL * scale.max(1.0) {
            return Err(Error::invalid(format!(
                "matrix is not Hermitian (asymmetry {worst:.3e})"
            )));
        }
        Ok(Self::symmetrized(m))
    }

    /// Projects onto the Hermitian part without validation. Only for callers
    /// that build the matrix Hermitian up to round-off.
    pub(crate) fn symmetrized(mut m: CMatrix) -> Self {
        let n = m.rows();
        for i in 0..n {
            m[(i, i)] = C64::new(m[(i, i)].re, 0.0);
            for j in (i + 1)..n {
                let avg = (m[(i, j)] + m[(j, i)].conj()) * 0.5;
                m[(i, j)] = avg;
                m[(j, i)] = avg.conj();
            }
        }
        Self(m)
    }

    pub fn identity(n: usize) -> Self {
        Self(CMatrix::identity(n))
    }

    pub fn from_real_diag(values: &[f64]) -> Self {
        Self(CMatrix::from_real_diag(values))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.0[(i, i)].re).sum()
    }

    pub fn scale(&self, s: f64) -> HermitianMatrix {
        Self(self.0.scale(s))
    }

    /// `A + c·I`.
    pub fn add_scaled_identity(&self, c: f64) -> HermitianMatrix {
        let mut m = self.0.clone();
        for i in 0..self.dim() {
            m[(i, i)] += c;
        }
        Self(m)
    }

    pub fn add(&self, rhs: &HermitianMatrix) -> Result<HermitianMatrix> {
        if rhs.dim() != self.dim() {
            return Err(Error::invalid("dimension mismatch in matrix sum"));
        }
        let data = self
            .0
            .as_slice()
            .iter()
            .zip(rhs.0.as_slice())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self(CMatrix::from_row_major(self.dim(), self.dim(), data)?))
    }

    /// `U A Uᴴ` for any square `U` of matching size.
    pub fn conjugate_by(&self, u: &CMatrix) -> Result<HermitianMatrix> {
        let prod = u.matmul(&self.0)?.matmul(&u.adjoint())?;
        Ok(Self::symmetrized(prod))
    }

    pub fn cholesky(&self) -> Result<Cholesky> {
        Cholesky::factor(self)
    }

    pub fn inverse(&self) -> Result<HermitianMatrix> {
        self.cholesky()?.inverse()
    }

    /// Eigenvalues in ascending order together with the matching unit-norm
    /// eigenvectors (stored as columns).
    pub fn eigen(&self) -> (Vec<f64>, CMatrix) {
        let n = self.dim();
        let eig = self.0.to_nalgebra().symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let vectors = CMatrix::from_fn(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
        (values, vectors)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.eigen().0
    }
}

/// Lower-triangular Cholesky factor `A = L Lᴴ` of a positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: CMatrix,
}

impl Cholesky {
    pub fn factor(a: &HermitianMatrix) -> Result<Self> {
        let n = a.dim();
        let a = a.as_matrix();
        let mut l = CMatrix::zeros(n, n);
        let scale = (0..n).map(|i| a[(i, i)].re.abs()).fold(0.0, f64::max);
        for j in 0..n {
            let mut d = a[(j, j)].re;
            for k in 0..j {
                d -= l[(j, k)].norm_sqr();
            }
            if !(d > 1e-14 * scale) || d <= 1e-300 {
                return Err(Error::SingularMatrix(format!(
                    "matrix is not positive definite (pivot {j} = {d:.3e})"
                )));
            }
            let djj = d.sqrt();
            l[(j, j)] = C64::new(djj, 0.0);
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)].conj();
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows()
    }

    pub fn factor_matrix(&self) -> &CMatrix {
        &self.l
    }

    /// Writes `L⁻¹ b` into `out`.
    pub fn solve_lower_into(&self, b: &[C64], out: &mut [C64]) {
        let n = self.dim();
        for i in 0..n {
            let row = self.l.row(i);
            let mut s = b[i];
            for k in 0..i {
                s -= row[k] * out[k];
            }
            out[i] = s / row[i].re;
        }
    }

    pub fn solve_lower(&self, b: &[C64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); b.len()];
        self.solve_lower_into(b, &mut out);
        out
    }

    /// `A⁻¹ b`.
    pub fn solve(&self, b: &[C64]) -> Vec<C64> {
        let n = self.dim();
        let mut y = self.solve_lower(b);
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.l[(k, i)].conj() * y[k];
            }
            y[i] = s / self.l[(i, i)].re;
        }
        y
    }

    /// `bᴴ A⁻¹ b = ‖L⁻¹ b‖²`.
    pub fn inv_quad(&self, b: &[C64]) -> f64 {
        norm_sqr(&self.solve_lower(b))
    }

    pub fn inverse(&self) -> Result<HermitianMatrix> {
        let n = self.dim();
        let mut inv = CMatrix::zeros(n, n);
        let mut e = vec![C64::new(0.0, 0.0); n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = C64::new(0.0, 0.0));
            e[j] = C64::new(1.0, 0.0);
            let col = self.solve(&e);
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        Ok(HermitianMatrix::symmetrized(inv))
    }
}

/// Toeplitz correlation matrix with entries `rho^|i−j|`.
pub fn toeplitz(rho: f64, m: usize) -> Result<HermitianMatrix> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::invalid(format!("rho must lie in [0, 1), got {rho}")));
    }
    if m == 0 {
        return Err(Error::invalid("Toeplitz size must be positive"));
    }
    let m = CMatrix::from_fn(m, m, |i, j| {
        C64::new(rho.powi(i.abs_diff(j) as i32), 0.0)
    });
    Ok(HermitianMatrix(m))
}

/// Inverse square root of a Hermitian PSD matrix through its eigendecomposition.
///
/// Eigenvalues below `floor·λ_max` are raised to that level before inversion, so
/// near-singular (e.g. rank-deficient plus small ridge) inputs stay usable.
pub fn herm_inv_sqrt(a: &HermitianMatrix, floor: f64) -> Result<HermitianMatrix> {
    if !(floor > 0.0) {
        return Err(Error::invalid(format!("eigenvalue floor must be positive, got {floor}")));
    }
    let (values, vectors) = a.eigen();
    let lmax = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lmax > 1e-300) {
        return Err(Error::SingularMatrix(
            "all eigenvalues are below 1e-300".to_string(),
        ));
    }
    let lo = floor * lmax;
    let n = a.dim();
    let scales: Vec<f64> = values.iter().map(|&l| l.max(lo).powf(-0.5)).collect();
    let mut out = CMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut s = C64::new(0.0, 0.0);
            for k in 0..n {
                s += vectors[(i, k)] * scales[k] * vectors[(j, k)].conj();
            }
            out[(i, j)] = s;
        }
    }
    Ok(HermitianMatrix::symmetrized(out))
}

/// `xᴴ A y`.
pub fn quad_form(a: &HermitianMatrix, x: &[C64], y: &[C64]) -> Result<C64> {
    let n = a.dim();
    if x.len() != n || y.len() != n {
        return Err(Error::invalid(format!(
            "quadratic form of {n}x{n} matrix with vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    let ay = a.as_matrix().mul_vec(y)?;
    Ok(dot_h(x, &ay))
}

/// Unitary DFT plan of a fixed length with cached twiddles.
///
/// Forward transform: `X_k = (1/√m) Σ_n x_n e^{−2πi kn/m}`.
#[derive(Debug, Clone)]
pub struct DftPlan {
    m: usize,
    twiddles: Vec<C64>,
}

impl DftPlan {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::invalid("DFT length must be positive"));
        }
        let twiddles = (0..m)
            .map(|k| C64::from_polar(1.0, -2.0 * PI * k as f64 / m as f64))
            .collect();
        Ok(Self { m, twiddles })
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    fn transform(&self, v: &[C64], out: &mut [C64], inverse: bool) {
        let m = self.m;
        let norm = 1.0 / (m as f64).sqrt();
        for (k, o) in out.iter_mut().enumerate() {
            let mut s = C64::new(0.0, 0.0);
            for (n, x) in v.iter().enumerate() {
                let w = self.twiddles[(k * n) % m];
                s += x * if inverse { w.conj() } else { w };
            }
            *o = s * norm;
        }
    }

    pub fn forward_into(&self, v: &[C64], out: &mut [C64]) {
        assert_eq!(v.len(), self.m, "DFT input length");
        self.transform(v, out, false);
    }

    pub fn forward(&self, v: &[C64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.m];
        self.forward_into(v, &mut out);
        out
    }

    pub fn inverse(&self, v: &[C64]) -> Vec<C64> {
        assert_eq!(v.len(), self.m, "DFT input length");
        let mut out = vec![C64::new(0.0, 0.0); self.m];
        self.transform(v, &mut out, true);
        out
    }

    /// Iterative radix-2 transform; falls back to the direct sum when the
    /// length is not a power of two.
    pub fn forward_fast(&self, v: &[C64]) -> Vec<C64> {
        let m = self.m;
        if !m.is_power_of_two() {
            return self.forward(v);
        }
        assert_eq!(v.len(), m, "DFT input length");
        let bits = m.trailing_zeros();
        let mut a: Vec<C64> = vec![C64::new(0.0, 0.0); m];
        for (i, x) in v.iter().enumerate() {
            let j = if bits == 0 {
                0
            } else {
                i.reverse_bits() >> (usize::BITS - bits)
            };
            a[j] = *x;
        }
        let mut len = 2;
        while len <= m {
            let step = m / len;
            for start in (0..m).step_by(len) {
                for k in 0..len / 2 {
                    let w = self.twiddles[k * step];
                    let u = a[start + k];
                    let t = a[start + k + len / 2] * w;
                    a[start + k] = u + t;
                    a[start + k + len / 2] = u - t;
                }
            }
            len <<= 1;
        }
        let norm = 1.0 / (m as f64).sqrt();
        a.iter_mut().for_each(|x| *x *= norm);
        a
    }
}

pub fn dft_unitary(v: &[C64]) -> Result<Vec<C64>> {
    Ok(DftPlan::new(v.len())?.forward(v))
}

pub fn idft_unitary(v: &[C64]) -> Result<Vec<C64>> {
    Ok(DftPlan::new(v.len())?.inverse(v))
}
