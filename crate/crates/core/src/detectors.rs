//! Matched-filter family of detection statistics.
//!
//! `Λ_MF = |pᴴΣ⁻¹z|² / (pᴴΣ⁻¹p)` and the scale-invariant
//! `Λ_NMF = |pᴴΣ⁻¹z|² / ((pᴴΣ⁻¹p)(zᴴΣ⁻¹z))`, evaluated either with a known
//! covariance or with an SCM / Tyler plug-in estimate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::covest::{CovarianceEstimate, EstimateKind};
use crate::error::{Error, Result};
use crate::linalg::{dot_h, norm_sqr, quad_form, Cholesky, HermitianMatrix, C64};
use crate::sim::steering;

const DEGENERATE: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DetectorKind {
    #[serde(rename = "MF")]
    Mf,
    #[serde(rename = "NMF")]
    Nmf,
    #[serde(rename = "AMF-SCM")]
    AmfScm,
    #[serde(rename = "ANMF-SCM")]
    AnmfScm,
    #[serde(rename = "ANMF-Tyler")]
    AnmfTyler,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 5] = [
        DetectorKind::Mf,
        DetectorKind::Nmf,
        DetectorKind::AmfScm,
        DetectorKind::AnmfScm,
        DetectorKind::AnmfTyler,
    ];

    pub fn is_normalized(self) -> bool {
        matches!(self, DetectorKind::Nmf | DetectorKind::AnmfScm | DetectorKind::AnmfTyler)
    }

    pub fn is_adaptive(self) -> bool {
        matches!(
            self,
            DetectorKind::AmfScm | DetectorKind::AnmfScm | DetectorKind::AnmfTyler
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            DetectorKind::Mf => "MF",
            DetectorKind::Nmf => "NMF",
            DetectorKind::AmfScm => "AMF-SCM",
            DetectorKind::AnmfScm => "ANMF-SCM",
            DetectorKind::AnmfTyler => "ANMF-Tyler",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown detector '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorStatistic {
    pub value: f64,
    pub detector_kind: DetectorKind,
    /// Doppler bin of the steering vector.
    pub d: usize,
}

fn check_dims(z: &[C64], p: &[C64], sigma_inv: &HermitianMatrix) -> Result<()> {
    let m = sigma_inv.dim();
    if z.len() != m || p.len() != m {
        return Err(Error::invalid(format!(
            "snapshot ({}) and steering ({}) must match covariance size {m}",
            z.len(),
            p.len()
        )));
    }
    Ok(())
}

fn steering_power(p: &[C64], sigma_inv: &HermitianMatrix) -> Result<f64> {
    let pp = quad_form(sigma_inv, p, p)?.re;
    if !(pp > DEGENERATE) {
        return Err(Error::SingularMatrix(format!(
            "degenerate steering power pᴴΣ⁻¹p = {pp:.3e}"
        )));
    }
    Ok(pp)
}

/// `|pᴴΣ⁻¹z|² / (pᴴΣ⁻¹p)`.
pub fn mf_stat(z: &[C64], p: &[C64], sigma_inv: &HermitianMatrix) -> Result<f64> {
    check_dims(z, p, sigma_inv)?;
    let pp = steering_power(p, sigma_inv)?;
    let pz = quad_form(sigma_inv, p, z)?;
    Ok(pz.norm_sqr() / pp)
}

/// `|pᴴΣ⁻¹z|² / ((pᴴΣ⁻¹p)(zᴴΣ⁻¹z))`, clamped to [0, 1] against round-off.
pub fn nmf_stat(z: &[C64], p: &[C64], sigma_inv: &HermitianMatrix) -> Result<f64> {
    check_dims(z, p, sigma_inv)?;
    if norm_sqr(z) == 0.0 {
        return Err(Error::invalid("NMF is undefined for a zero snapshot"));
    }
    let pp = steering_power(p, sigma_inv)?;
    let zz = quad_form(sigma_inv, z, z)?.re;
    if !(zz > DEGENERATE) {
        return Err(Error::SingularMatrix(format!("degenerate zᴴΣ⁻¹z = {zz:.3e}")));
    }
    let pz = quad_form(sigma_inv, p, z)?;
    Ok((pz.norm_sqr() / (pp * zz)).clamp(0.0, 1.0))
}

/// Plug-in statistic with an estimated (or oracle) covariance.
pub fn adaptive_stat(
    kind: DetectorKind,
    z: &[C64],
    p: &[C64],
    est: &CovarianceEstimate,
) -> Result<DetectorStatistic> {
    let expected = match kind {
        DetectorKind::Mf | DetectorKind::Nmf => None,
        DetectorKind::AmfScm | DetectorKind::AnmfScm => Some(EstimateKind::Scm),
        DetectorKind::AnmfTyler => Some(EstimateKind::TylerFp),
    };
    if let Some(e) = expected {
        if est.kind != e && est.kind != EstimateKind::Oracle && est.kind != EstimateKind::RidgeRegularized
        {
            return Err(Error::invalid(format!(
                "{kind} expects a {e:?} covariance, got {:?}",
                est.kind
            )));
        }
    }
    let inv = est.matrix.inverse()?;
    let value = if kind.is_normalized() {
        nmf_stat(z, p, &inv)?
    } else {
        mf_stat(z, p, &inv)?
    };
    let d = (0..p.len())
        .find(|&d| {
            steering(d, p.len())
                .map(|s| s.iter().zip(p).all(|(a, b)| (a - b).norm() < 1e-12))
                .unwrap_or(false)
        })
        .unwrap_or(usize::MAX);
    Ok(DetectorStatistic {
        value,
        detector_kind: kind,
        d,
    })
}

/// MF and NMF statistics at every Doppler bin for one covariance.
///
/// Factorizes `Σ = LLᴴ` once and whitens all steering vectors, so each
/// snapshot costs a single triangular solve plus `m` inner products.
#[derive(Debug, Clone)]
pub struct SteeringBank {
    chol: Cholesky,
    whitened_steering: Vec<Vec<C64>>,
    steering_power: Vec<f64>,
}

/// Statistics of one snapshot across all bins.
#[derive(Debug, Clone, PartialEq)]
pub struct BinStatistics {
    pub mf: Vec<f64>,
    pub nmf: Vec<f64>,
}

impl SteeringBank {
    pub fn new(covariance: &HermitianMatrix) -> Result<Self> {
        let m = covariance.dim();
        let chol = covariance.cholesky()?;
        let mut whitened_steering = Vec::with_capacity(m);
        let mut steering_power = Vec::with_capacity(m);
        for d in 0..m {
            let w = chol.solve_lower(&steering(d, m)?);
            let pp = norm_sqr(&w);
            if !(pp > DEGENERATE) {
                return Err(Error::SingularMatrix(format!("degenerate steering power at bin {d}")));
            }
            steering_power.push(pp);
            whitened_steering.push(w);
        }
        Ok(Self {
            chol,
            whitened_steering,
            steering_power,
        })
    }

    pub fn dim(&self) -> usize {
        self.chol.dim()
    }

    pub fn evaluate(&self, z: &[C64]) -> Result<BinStatistics> {
        let m = self.dim();
        if z.len() != m {
            return Err(Error::invalid(format!("snapshot length {} != {m}", z.len())));
        }
        let wz = self.chol.solve_lower(z);
        let zz = norm_sqr(&wz);
        if !(zz > DEGENERATE) {
            return Err(Error::invalid("NMF is undefined for a zero snapshot"));
        }
        let mut mf = Vec::with_capacity(m);
        let mut nmf = Vec::with_capacity(m);
        for (wp, pp) in self.whitened_steering.iter().zip(&self.steering_power) {
            let num = dot_h(wp, &wz).norm_sqr();
            mf.push(num / pp);
            nmf.push((num / (pp * zz)).clamp(0.0, 1.0));
        }
        Ok(BinStatistics { mf, nmf })
    }
}

/// `−ln P_fa`, the MF threshold under Gaussian disturbance with known covariance.
pub fn mf_analytic_threshold(pfa: f64) -> Result<f64> {
    if !(pfa > 0.0 && pfa < 1.0) {
        return Err(Error::invalid(format!("pfa must lie in (0, 1), got {pfa}")));
    }
    Ok(-pfa.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covest::{scm, tyler_fp, TylerConfig};
    use crate::linalg::{toeplitz, CMatrix, DftPlan};
    use crate::rng::{complex_normal, substream};
    use crate::sim::{inject_target, DisturbanceKind, DisturbanceModel, DisturbanceSpec, Phase, TargetSpec};
    use rand::Rng;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn mf_trivial_cases() {
        let i16 = HermitianMatrix::identity(16);
        let p = steering(0, 16).unwrap();
        assert!((mf_stat(&p, &p, &i16).unwrap() - 16.0).abs() < 1e-12);
        let z = steering(5, 16).unwrap();
        assert!(mf_stat(&z, &p, &i16).unwrap() < 1e-20);
        let zero = HermitianMatrix::from_real_diag(&[0.0; 16]);
        assert!(matches!(mf_stat(&z, &p, &zero), Err(Error::SingularMatrix(_))));
        assert!(mf_stat(&z[..4], &p, &i16).is_err());
    }

    #[test]
    fn nmf_trivial_cases() {
        let t = toeplitz(0.5, 16).unwrap();
        let tinv = t.inverse().unwrap();
        let p = steering(3, 16).unwrap();
        let z: Vec<C64> = p.iter().map(|v| v * c(-1.5, 0.7)).collect();
        assert!((nmf_stat(&z, &p, &tinv).unwrap() - 1.0).abs() < 1e-12);

        // z orthogonal to p in the Σ⁻¹ inner product: z = Σ q with q ⟂ p.
        let q = steering(7, 16).unwrap();
        let zo = t.as_matrix().mul_vec(&q).unwrap();
        assert!(nmf_stat(&zo, &p, &tinv).unwrap() < 1e-20);

        let zero = vec![c(0.0, 0.0); 16];
        assert!(matches!(nmf_stat(&zero, &p, &tinv), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn nmf_scale_invariance_and_range() {
        let mut rng = substream(1, &[]);
        let tinv = toeplitz(0.5, 16).unwrap().inverse().unwrap();
        let p = steering(2, 16).unwrap();
        for _ in 0..1000 {
            let z: Vec<C64> = (0..16).map(|_| complex_normal(&mut rng)).collect();
            let s = nmf_stat(&z, &p, &tinv).unwrap();
            assert!((0.0..=1.0).contains(&s));
            let k = c(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let zs: Vec<C64> = z.iter().map(|v| v * k).collect();
            assert!((nmf_stat(&zs, &p, &tinv).unwrap() - s).abs() < 1e-12);
        }
    }

    #[test]
    fn adaptive_with_oracle_equals_known_covariance() {
        let t = toeplitz(0.5, 16).unwrap();
        let tinv = t.inverse().unwrap();
        let est = CovarianceEstimate::oracle(t);
        let mut rng = substream(2, &[]);
        let z: Vec<C64> = (0..16).map(|_| complex_normal(&mut rng)).collect();
        let p = steering(4, 16).unwrap();
        let a = adaptive_stat(DetectorKind::Mf, &z, &p, &est).unwrap();
        assert_eq!(a.d, 4);
        assert!((a.value - mf_stat(&z, &p, &tinv).unwrap()).abs() < 1e-12);
        let b = adaptive_stat(DetectorKind::Nmf, &z, &p, &est).unwrap();
        assert!((b.value - nmf_stat(&z, &p, &tinv).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn anmf_tyler_invariant_to_secondary_scaling() {
        let model =
            DisturbanceModel::new(DisturbanceSpec::new(DisturbanceKind::Ccgn, 0.5, 1.0, 0.0, 16))
                .unwrap();
        let mut rng = substream(3, &[]);
        let sec: Vec<Vec<C64>> = (0..32).map(|_| model.draw(&mut rng)).collect();
        let scaled: Vec<Vec<C64>> = sec
            .iter()
            .map(|v| {
                let s = rng.random_range(0.01..100.0);
                v.iter().map(|x| x * s).collect()
            })
            .collect();
        let z = model.draw(&mut rng);
        let p = steering(0, 16).unwrap();
        let cfg = TylerConfig::default();
        let a = adaptive_stat(DetectorKind::AnmfTyler, &z, &p, &tyler_fp(&sec, &cfg).unwrap()).unwrap();
        let b =
            adaptive_stat(DetectorKind::AnmfTyler, &z, &p, &tyler_fp(&scaled, &cfg).unwrap()).unwrap();
        assert!((a.value - b.value).abs() < 1e-12);
        assert!(adaptive_stat(DetectorKind::AnmfTyler, &z, &p, &scm(&sec).unwrap()).is_err());
    }

    #[test]
    fn steering_bank_matches_direct_formulas() {
        let t = toeplitz(0.5, 16).unwrap().add_scaled_identity(0.1);
        let tinv = t.inverse().unwrap();
        let bank = SteeringBank::new(&t).unwrap();
        let mut rng = substream(4, &[]);
        for _ in 0..20 {
            let z: Vec<C64> = (0..16).map(|_| complex_normal(&mut rng)).collect();
            let stats = bank.evaluate(&z).unwrap();
            for d in 0..16 {
                let p = steering(d, 16).unwrap();
                let mf = mf_stat(&z, &p, &tinv).unwrap();
                let nmf = nmf_stat(&z, &p, &tinv).unwrap();
                assert!((stats.mf[d] - mf).abs() < 1e-10 * mf.max(1.0));
                assert!((stats.nmf[d] - nmf).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn statistics_invariant_to_unitary_change_of_basis() {
        let plan = DftPlan::new(16).unwrap();
        let u = CMatrix::from_fn(16, 16, |i, j| {
            let mut e = vec![c(0.0, 0.0); 16];
            e[j] = c(1.0, 0.0);
            plan.forward(&e)[i]
        });
        let t = toeplitz(0.5, 16).unwrap();
        let tu = t.conjugate_by(&u).unwrap();
        let (ti, tui) = (t.inverse().unwrap(), tu.inverse().unwrap());
        let mut rng = substream(5, &[]);
        let z: Vec<C64> = (0..16).map(|_| complex_normal(&mut rng)).collect();
        let p = steering(6, 16).unwrap();
        let (zu, pu) = (u.mul_vec(&z).unwrap(), u.mul_vec(&p).unwrap());
        let a = mf_stat(&z, &p, &ti).unwrap();
        let b = mf_stat(&zu, &pu, &tui).unwrap();
        assert!((a - b).abs() < 1e-10 * a.max(1.0));
        let a = nmf_stat(&z, &p, &ti).unwrap();
        let b = nmf_stat(&zu, &pu, &tui).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn mf_nondecreasing_in_snr() {
        let t = toeplitz(0.5, 16).unwrap();
        let tinv = t.inverse().unwrap();
        let model =
            DisturbanceModel::new(DisturbanceSpec::new(DisturbanceKind::Cgn, 0.5, 1.0, 0.0, 16))
                .unwrap();
        let mut rng = substream(6, &[]);
        let p = steering(0, 16).unwrap();
        for _ in 0..50 {
            let dist = model.draw(&mut rng);
            // Disturbance aligned so that the target adds constructively.
            let mut prev = mf_stat(&dist, &p, &tinv).unwrap();
            let phase = quad_form(&tinv, &p, &dist).unwrap().arg() / (2.0 * std::f64::consts::PI);
            let phase = phase.rem_euclid(1.0);
            for snr_db in (-10..=30).step_by(2) {
                let t = TargetSpec {
                    d: 0,
                    snr: crate::sim::db_to_linear(snr_db as f64),
                    phase: Phase::Fixed(phase),
                };
                let z = inject_target(&dist, &t, &mut rng).unwrap();
                let s = mf_stat(&z, &p, &tinv).unwrap();
                assert!(s >= prev * (1.0 - 1e-12));
                prev = s;
            }
        }
    }

    #[test]
    fn amf_scm_exceeds_nominal_pfa_at_analytic_threshold() {
        let spec = DisturbanceSpec::new(DisturbanceKind::Cgn, 0.5, 1.0, 0.0, 16);
        let model = DisturbanceModel::new(spec).unwrap();
        let lambda = mf_analytic_threshold(0.01).unwrap();
        let p = steering(0, 16).unwrap();
        let trials = 100_000;
        let mut hits = 0usize;
        let mut rng = substream(7, &[]);
        for _ in 0..trials {
            let sec: Vec<Vec<C64>> = (0..32).map(|_| model.draw(&mut rng)).collect();
            let est = scm(&sec).unwrap();
            let z = model.draw(&mut rng);
            let bank = SteeringBank::new(&est.matrix).unwrap();
            if bank.evaluate(&z).unwrap().mf[0] > lambda {
                hits += 1;
            }
            let _ = p.len();
        }
        let pfa = hits as f64 / trials as f64;
        let sd = (0.01 * 0.99 / trials as f64).sqrt();
        assert!(pfa > 0.01 + 3.0 * sd, "AMF-SCM pfa {pfa}");
    }

    #[test]
    fn analytic_threshold() {
        assert!((mf_analytic_threshold(0.01).unwrap() - 100f64.ln()).abs() < 1e-15);
        assert!(mf_analytic_threshold(0.0).is_err());
    }
}
