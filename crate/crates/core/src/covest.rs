//! Covariance estimation from target-free secondary data.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm_sqr, CMatrix, HermitianMatrix, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EstimateKind {
    Scm,
    TylerFp,
    Oracle,
    RidgeRegularized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceEstimate {
    pub matrix: HermitianMatrix,
    pub kind: EstimateKind,
    /// Number of secondary vectors behind the estimate (0 for an oracle).
    pub k_samples: usize,
}

impl CovarianceEstimate {
    pub fn oracle(matrix: HermitianMatrix) -> Self {
        Self {
            matrix,
            kind: EstimateKind::Oracle,
            k_samples: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    /// Ridge-regularized copy, see [`ridge_regularize`].
    pub fn regularized(&self, eps_ridge: f64) -> Result<Self> {
        Ok(Self {
            matrix: ridge_regularize(&self.matrix, eps_ridge)?,
            kind: EstimateKind::RidgeRegularized,
            k_samples: self.k_samples,
        })
    }
}

fn check_snapshots<Z: AsRef<[C64]>>(z: &[Z]) -> Result<usize> {
    let first = z
        .first()
        .ok_or_else(|| Error::invalid("no secondary snapshots"))?
        .as_ref()
        .len();
    if first == 0 {
        return Err(Error::invalid("secondary snapshots are empty"));
    }
    if let Some(k) = z.iter().position(|v| v.as_ref().len() != first) {
        return Err(Error::invalid(format!(
            "snapshot {k} has length {} instead of {first}",
            z[k].as_ref().len()
        )));
    }
    Ok(first)
}

/// Accumulates `Σ w_k z_k z_kᴴ` into the lower triangle of a flat `m×m` buffer.
#[inline]
fn accumulate_outer(acc: &mut [C64], m: usize, z: &[C64], weight: f64) {
    for i in 0..m {
        let zi = z[i] * weight;
        let row = &mut acc[i * m..i * m + i + 1];
        for (j, a) in row.iter_mut().enumerate() {
            *a += zi * z[j].conj();
        }
    }
}

fn lower_to_hermitian(acc: &[C64], m: usize, scale: f64) -> HermitianMatrix {
    let mut out = CMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let v = acc[i * m + j] * scale;
            out[(i, j)] = v;
            out[(j, i)] = v.conj();
        }
    }
    HermitianMatrix::symmetrized(out)
}

/// Sample covariance `(1/K) Σ z_k z_kᴴ`.
pub fn scm<Z: AsRef<[C64]>>(z: &[Z]) -> Result<CovarianceEstimate> {
    let m = check_snapshots(z)?;
    let mut acc = vec![C64::new(0.0, 0.0); m * m];
    for v in z {
        accumulate_outer(&mut acc, m, v.as_ref(), 1.0);
    }
    Ok(CovarianceEstimate {
        matrix: lower_to_hermitian(&acc, m, 1.0 / z.len() as f64),
        kind: EstimateKind::Scm,
        k_samples: z.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TylerConfig {
    /// Stop once the relative Frobenius update falls below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for TylerConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 100,
        }
    }
}

/// Iteration history of a Tyler run.
#[derive(Debug, Clone)]
pub struct TylerTrace {
    pub estimate: CovarianceEstimate,
    /// Relative Frobenius update after each iteration.
    pub residuals: Vec<f64>,
}

/// Tyler's fixed-point shape estimator, trace-normalized to `m`.
///
/// Iterates `Σ ← (m/K) Σ_k z_k z_kᴴ / (z_kᴴ Σ⁻¹ z_k)` from the identity.
/// Snapshots are normalized to unit norm first; the fixed point only depends
/// on their directions.
pub fn tyler_fp<Z: AsRef<[C64]>>(z: &[Z], cfg: &TylerConfig) -> Result<CovarianceEstimate> {
    tyler_fp_traced(z, cfg).map(|t| t.estimate)
}

pub fn tyler_fp_traced<Z: AsRef<[C64]>>(z: &[Z], cfg: &TylerConfig) -> Result<TylerTrace> {
    let m = check_snapshots(z)?;
    let k = z.len();
    if k <= m {
        return Err(Error::invalid(format!(
            "Tyler's estimator needs more than m = {m} snapshots, got {k}"
        )));
    }
    if cfg.max_iter == 0 || !(cfg.tol > 0.0) {
        return Err(Error::invalid("Tyler iteration needs max_iter > 0 and tol > 0"));
    }
    // Unit-norm directions, split into real and imaginary planes with the
    // snapshot index fastest: entry (i, t) sits at i·kp + t. Padding lanes
    // stay zero and carry zero weight.
    let kp = k.div_ceil(LANES) * LANES;
    let mut d_re = vec![0.0; m * kp];
    let mut d_im = vec![0.0; m * kp];
    for (idx, v) in z.iter().enumerate() {
        let v = v.as_ref();
        let n2 = norm_sqr(v);
        if !(n2 > 0.0) || !n2.is_finite() {
            return Err(Error::invalid(format!("secondary snapshot {idx} is zero or non-finite")));
        }
        let s = 1.0 / n2.sqrt();
        for (i, x) in v.iter().enumerate() {
            d_re[i * kp + idx] = x.re * s;
            d_im[i * kp + idx] = x.im * s;
        }
    }

    // Lower triangles of Σ and of its Cholesky factor, row-major m×m.
    let mut sigma = vec![C64::new(0.0, 0.0); m * m];
    for i in 0..m {
        sigma[i * m + i] = C64::new(1.0, 0.0);
    }
    let mut chol = vec![C64::new(0.0, 0.0); m * m];
    let mut ws = TylerWorkspace {
        m,
        k,
        kp,
        d_re,
        d_im,
        w_re: vec![0.0; m * kp],
        w_im: vec![0.0; m * kp],
        inv_q: vec![0.0; kp],
        s_re: vec![0.0; m * kp],
        s_im: vec![0.0; m * kp],
        next: vec![C64::new(0.0, 0.0); m * m],
        simd: simd::available(),
    };
    let mut residuals = Vec::new();
    for _ in 0..cfg.max_iter {
        cholesky_lower(&sigma, m, &mut chol)?;
        let tr = ws.sweep(&chol).map_err(|t| {
            Error::SingularMatrix(format!("degenerate Tyler weight for snapshot {t}"))
        })?;
        let next = &ws.next;
        let scale = m as f64 / tr;
        let (mut diff2, mut ref2) = (0.0, 0.0);
        for i in 0..m {
            for j in 0..=i {
                let v = next[i * m + j] * scale;
                // Off-diagonal entries count twice in the full Frobenius norm.
                let mult = if i == j { 1.0 } else { 2.0 };
                diff2 += mult * (v - sigma[i * m + j]).norm_sqr();
                ref2 += mult * sigma[i * m + j].norm_sqr();
                sigma[i * m + j] = v;
            }
        }
        let residual = (diff2 / ref2.max(f64::MIN_POSITIVE)).sqrt();
        residuals.push(residual);
        if !residual.is_finite() {
            break;
        }
        if residual < cfg.tol {
            return Ok(TylerTrace {
                estimate: CovarianceEstimate {
                    matrix: lower_to_hermitian(&sigma, m, 1.0),
                    kind: EstimateKind::TylerFp,
                    k_samples: k,
                },
                residuals,
            });
        }
    }
    Err(Error::ConvergenceFailure {
        iterations: residuals.len(),
        residual: residuals.last().copied().unwrap_or(f64::NAN),
    })
}

struct TylerWorkspace {
    m: usize,
    k: usize,
    /// Row stride: `k` rounded up to a multiple of [`LANES`].
    kp: usize,
    d_re: Vec<f64>,
    d_im: Vec<f64>,
    w_re: Vec<f64>,
    w_im: Vec<f64>,
    inv_q: Vec<f64>,
    s_re: Vec<f64>,
    s_im: Vec<f64>,
    /// Unnormalized lower triangle of the next iterate.
    next: Vec<C64>,
    simd: bool,
}

impl TylerWorkspace {
    /// One weighted sweep; returns the trace of `next`, or the index of a
    /// snapshot with a non-positive quadratic form.
    fn sweep(&mut self, chol: &[C64]) -> std::result::Result<f64, usize> {
        let (m, k, kp) = (self.m, self.k, self.kp);
        // W = L⁻¹ D for all snapshots at once.
        for i in 0..m {
            let (done_re, row_re) = self.w_re.split_at_mut(i * kp);
            let (done_im, row_im) = self.w_im.split_at_mut(i * kp);
            let (row_re, row_im) = (&mut row_re[..kp], &mut row_im[..kp]);
            row_re.copy_from_slice(&self.d_re[i * kp..(i + 1) * kp]);
            row_im.copy_from_slice(&self.d_im[i * kp..(i + 1) * kp]);
            for j in 0..i {
                let l = chol[i * m + j];
                let (pr, pi) = (&done_re[j * kp..(j + 1) * kp], &done_im[j * kp..(j + 1) * kp]);
                axpy_conj_split(self.simd, l, pr, pi, row_re, row_im);
            }
            let inv = 1.0 / chol[i * m + i].re;
            row_re.iter_mut().chain(row_im.iter_mut()).for_each(|v| *v *= inv);
        }
        let inv_q = &mut self.inv_q;
        inv_q.fill(0.0);
        for i in 0..m {
            let (wr, wi) = (&self.w_re[i * kp..(i + 1) * kp], &self.w_im[i * kp..(i + 1) * kp]);
            for (q, (&a, &b)) in inv_q.iter_mut().zip(wr.iter().zip(wi)) {
                *q += a * a + b * b;
            }
        }
        for (t, q) in inv_q[..k].iter_mut().enumerate() {
            if !(*q > 0.0) {
                return Err(t);
            }
            *q = 1.0 / *q;
        }
        for (dst, src) in [(&mut self.s_re, &self.d_re), (&mut self.s_im, &self.d_im)] {
            for (drow, srow) in dst.chunks_exact_mut(kp).zip(src.chunks_exact(kp)) {
                for ((o, &x), &q) in drow.iter_mut().zip(srow).zip(inv_q.iter()) {
                    *o = x * q;
                }
            }
        }
        // next_ij = Σ_t s_it·conj(d_jt), lower triangle.
        let mut tr = 0.0;
        for i in 0..m {
            let (ar, ai) = (&self.s_re[i * kp..(i + 1) * kp], &self.s_im[i * kp..(i + 1) * kp]);
            for j in 0..=i {
                let (br, bi) = (&self.d_re[j * kp..(j + 1) * kp], &self.d_im[j * kp..(j + 1) * kp]);
                self.next[i * m + j] = dot_conj_split(self.simd, ar, ai, br, bi);
            }
            tr += self.next[i * m + i].re;
        }
        Ok(tr)
    }
}

const LANES: usize = 4;

/// `row −= l·p` over split planes whose length is a multiple of [`LANES`].
#[inline]
fn axpy_conj_split(simd: bool, l: C64, pr: &[f64], pi: &[f64], rr: &mut [f64], ri: &mut [f64]) {
    let n = rr.len();
    assert!(n % LANES == 0 && ri.len() == n && pr.len() == n && pi.len() == n);
    #[cfg(target_arch = "x86_64")]
    if simd {
        // SAFETY: AVX was detected at runtime and the lengths were checked above.
        unsafe { simd::axpy(l, pr, pi, rr, ri) };
        return;
    }
    let _ = simd;
    for t in 0..n {
        rr[t] -= l.re * pr[t] - l.im * pi[t];
        ri[t] -= l.re * pi[t] + l.im * pr[t];
    }
}

/// `Σ_t a_t·conj(b_t)` over split planes whose length is a multiple of [`LANES`].
///
/// Accumulates in [`LANES`] interleaved partial sums so the vector and
/// scalar paths round identically.
#[inline]
fn dot_conj_split(simd: bool, ar: &[f64], ai: &[f64], br: &[f64], bi: &[f64]) -> C64 {
    let n = ar.len();
    assert!(n % LANES == 0 && ai.len() == n && br.len() == n && bi.len() == n);
    #[cfg(target_arch = "x86_64")]
    if simd {
        // SAFETY: AVX was detected at runtime and the lengths were checked above.
        return unsafe { simd::dot(ar, ai, br, bi) };
    }
    let _ = simd;
    let mut re = [0.0; LANES];
    let mut im = [0.0; LANES];
    for t in 0..n {
        let l = t % LANES;
        re[l] += ar[t] * br[t] + ai[t] * bi[t];
        im[l] += ai[t] * br[t] - ar[t] * bi[t];
    }
    C64::new((re[0] + re[1]) + (re[2] + re[3]), (im[0] + im[1]) + (im[2] + im[3]))
}

#[cfg(target_arch = "x86_64")]
mod simd {
    use std::arch::x86_64::*;

    use super::LANES;
    use crate::linalg::C64;

    pub(super) fn available() -> bool {
        std::arch::is_x86_feature_detected!("avx")
    }

    /// Caller guarantees AVX and equal lengths that are multiples of [`LANES`].
    #[target_feature(enable = "avx")]
    pub(super) unsafe fn axpy(l: C64, pr: &[f64], pi: &[f64], rr: &mut [f64], ri: &mut [f64]) {
        let lr = _mm256_set1_pd(l.re);
        let li = _mm256_set1_pd(l.im);
        let mut c = 0;
        while c < rr.len() {
            let a = _mm256_loadu_pd(pr.as_ptr().add(c));
            let b = _mm256_loadu_pd(pi.as_ptr().add(c));
            let r = _mm256_loadu_pd(rr.as_ptr().add(c));
            let i = _mm256_loadu_pd(ri.as_ptr().add(c));
            let dr = _mm256_sub_pd(_mm256_mul_pd(lr, a), _mm256_mul_pd(li, b));
            let di = _mm256_add_pd(_mm256_mul_pd(lr, b), _mm256_mul_pd(li, a));
            _mm256_storeu_pd(rr.as_mut_ptr().add(c), _mm256_sub_pd(r, dr));
            _mm256_storeu_pd(ri.as_mut_ptr().add(c), _mm256_sub_pd(i, di));
            c += LANES;
        }
    }

    /// Caller guarantees AVX and equal lengths that are multiples of [`LANES`].
    #[target_feature(enable = "avx")]
    pub(super) unsafe fn dot(ar: &[f64], ai: &[f64], br: &[f64], bi: &[f64]) -> C64 {
        let mut re = _mm256_setzero_pd();
        let mut im = _mm256_setzero_pd();
        let mut c = 0;
        while c < ar.len() {
            let a_r = _mm256_loadu_pd(ar.as_ptr().add(c));
            let a_i = _mm256_loadu_pd(ai.as_ptr().add(c));
            let b_r = _mm256_loadu_pd(br.as_ptr().add(c));
            let b_i = _mm256_loadu_pd(bi.as_ptr().add(c));
            re = _mm256_add_pd(re, _mm256_add_pd(_mm256_mul_pd(a_r, b_r), _mm256_mul_pd(a_i, b_i)));
            im = _mm256_add_pd(im, _mm256_sub_pd(_mm256_mul_pd(a_i, b_r), _mm256_mul_pd(a_r, b_i)));
            c += LANES;
        }
        let mut r = [0.0; LANES];
        let mut i = [0.0; LANES];
        _mm256_storeu_pd(r.as_mut_ptr(), re);
        _mm256_storeu_pd(i.as_mut_ptr(), im);
        C64::new((r[0] + r[1]) + (r[2] + r[3]), (i[0] + i[1]) + (i[2] + i[3]))
    }
}

#[cfg(not(target_arch = "x86_64"))]
mod simd {
    pub(super) fn available() -> bool {
        false
    }
}

/// Cholesky factor of the Hermitian matrix whose lower triangle is `a`.
fn cholesky_lower(a: &[C64], m: usize, l: &mut [C64]) -> Result<()> {
    let scale = (0..m).map(|i| a[i * m + i].re.abs()).fold(0.0, f64::max);
    for j in 0..m {
        let mut d = a[j * m + j].re;
        for k in 0..j {
            d -= l[j * m + k].norm_sqr();
        }
        if !(d > 1e-14 * scale) || d <= 1e-300 {
            return Err(Error::SingularMatrix(format!(
                "Tyler iterate is not positive definite (pivot {j} = {d:.3e})"
            )));
        }
        let djj = d.sqrt();
        l[j * m + j] = C64::new(djj, 0.0);
        for i in (j + 1)..m {
            let mut s = a[i * m + j];
            for k in 0..j {
                s -= l[i * m + k] * l[j * m + k].conj();
            }
            l[i * m + j] = s / djj;
        }
    }
    Ok(())
}

/// `R + ε·(tr R / m)·I`.
pub fn ridge_regularize(r: &HermitianMatrix, eps_ridge: f64) -> Result<HermitianMatrix> {
    if !(eps_ridge > 0.0) || !eps_ridge.is_finite() {
        return Err(Error::invalid(format!("ridge parameter must be positive, got {eps_ridge}")));
    }
    let load = eps_ridge * r.trace() / r.dim() as f64;
    Ok(r.add_scaled_identity(load))
}
