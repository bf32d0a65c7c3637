//! Seeded disturbance environments and target injection.
//!
//! Clutter is compound Gaussian: a Gamma texture `τ` (shape `μ`, scale `1/μ`,
//! so `E[τ] = 1`) multiplies correlated speckle `CN(0, T(ρ))`. The texture is
//! drawn once per m-pulse window. Thermal noise is white `CN(0, σ_n² I)` and is
//! added independently.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{toeplitz, CMatrix, HermitianMatrix, C64};
use crate::rng::{complex_normal, derive_seed, substream};

const DOMAIN_CUBE: u64 = 0xC0BE;
const DOMAIN_TARGET: u64 = 0x7A26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DisturbanceKind {
    #[serde(rename = "cgn")]
    Cgn,
    #[serde(rename = "ccgn")]
    Ccgn,
    #[serde(rename = "awgn")]
    Awgn,
    #[serde(rename = "cgn+awgn")]
    CgnAwgn,
    #[serde(rename = "ccgn+awgn")]
    CcgnAwgn,
}

impl DisturbanceKind {
    pub const ALL: [DisturbanceKind; 5] = [
        DisturbanceKind::Cgn,
        DisturbanceKind::Ccgn,
        DisturbanceKind::Awgn,
        DisturbanceKind::CgnAwgn,
        DisturbanceKind::CcgnAwgn,
    ];

    pub fn has_clutter(self) -> bool {
        !matches!(self, DisturbanceKind::Awgn)
    }

    pub fn is_compound(self) -> bool {
        matches!(self, DisturbanceKind::Ccgn | DisturbanceKind::CcgnAwgn)
    }

    pub fn has_noise(self) -> bool {
        matches!(
            self,
            DisturbanceKind::Awgn | DisturbanceKind::CgnAwgn | DisturbanceKind::CcgnAwgn
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            DisturbanceKind::Cgn => "cgn",
            DisturbanceKind::Ccgn => "ccgn",
            DisturbanceKind::Awgn => "awgn",
            DisturbanceKind::CgnAwgn => "cgn+awgn",
            DisturbanceKind::CcgnAwgn => "ccgn+awgn",
        }
    }
}

impl fmt::Display for DisturbanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for DisturbanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown disturbance kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceSpec {
    pub kind: DisturbanceKind,
    /// Toeplitz correlation of the speckle.
    pub rho: f64,
    /// Gamma shape of the texture.
    pub mu_texture: f64,
    /// Thermal noise power.
    pub sigma_n2: f64,
    /// Snapshot length.
    pub m: usize,
}

impl DisturbanceSpec {
    pub fn new(kind: DisturbanceKind, rho: f64, mu_texture: f64, sigma_n2: f64, m: usize) -> Self {
        Self {
            kind,
            rho,
            mu_texture,
            sigma_n2,
            m,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::invalid("snapshot length m must be positive"));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::invalid(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        if !(self.mu_texture > 0.0) || !self.mu_texture.is_finite() {
            return Err(Error::invalid(format!(
                "texture shape must be positive, got {}",
                self.mu_texture
            )));
        }
        if !(self.sigma_n2 >= 0.0) || !self.sigma_n2.is_finite() {
            return Err(Error::invalid(format!(
                "noise power must be nonnegative, got {}",
                self.sigma_n2
            )));
        }
        Ok(())
    }

    /// `E[z zᴴ]`: `T(ρ)` for the clutter part (E[τ] = 1) plus `σ_n² I`.
    pub fn true_covariance(&self) -> Result<HermitianMatrix> {
        self.validate()?;
        let mut cov = if self.kind.has_clutter() {
            toeplitz(self.rho, self.m)?
        } else {
            HermitianMatrix::from_real_diag(&vec![0.0; self.m])
        };
        if self.kind.has_noise() {
            cov = cov.add_scaled_identity(self.sigma_n2);
        }
        Ok(cov)
    }
}

/// Validated sampler for one [`DisturbanceSpec`].
#[derive(Debug, Clone)]
pub struct DisturbanceModel {
    spec: DisturbanceSpec,
    speckle_factor: Option<CMatrix>,
    texture: Option<Gamma<f64>>,
    noise_std: f64,
}

impl DisturbanceModel {
    pub fn new(spec: DisturbanceSpec) -> Result<Self> {
        spec.validate()?;
        let speckle_factor = if spec.kind.has_clutter() {
            Some(toeplitz(spec.rho, spec.m)?.cholesky()?.factor_matrix().clone())
        } else {
            None
        };
        let texture = if spec.kind.is_compound() {
            Some(
                Gamma::new(spec.mu_texture, 1.0 / spec.mu_texture)
                    .map_err(|e| Error::invalid(format!("texture distribution: {e}")))?,
            )
        } else {
            None
        };
        let noise_std = if spec.kind.has_noise() {
            spec.sigma_n2.sqrt()
        } else {
            0.0
        };
        Ok(Self {
            spec,
            speckle_factor,
            texture,
            noise_std,
        })
    }

    pub fn spec(&self) -> &DisturbanceSpec {
        &self.spec
    }

    pub fn m(&self) -> usize {
        self.spec.m
    }

    /// Texture for one window; 1 for non-compound environments.
    pub fn draw_texture<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.texture {
            Some(g) => g.sample(rng),
            None => 1.0,
        }
    }

    /// One disturbance snapshot with the given texture.
    pub fn draw_with_texture<R: Rng + ?Sized>(&self, tau: f64, rng: &mut R) -> Vec<C64> {
        let m = self.spec.m;
        let mut out = vec![C64::new(0.0, 0.0); m];
        if let Some(l) = &self.speckle_factor {
            let w: Vec<C64> = (0..m).map(|_| complex_normal(rng)).collect();
            let amp = tau.sqrt();
            for (i, o) in out.iter_mut().enumerate() {
                let row = l.row(i);
                let mut s = C64::new(0.0, 0.0);
                for k in 0..=i {
                    s += row[k] * w[k];
                }
                *o = s * amp;
            }
        }
        if self.spec.kind.has_noise() {
            for o in out.iter_mut() {
                *o += complex_normal(rng) * self.noise_std;
            }
        }
        out
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<C64> {
        let tau = self.draw_texture(rng);
        self.draw_with_texture(tau, rng)
    }
}

/// Draws a single snapshot from `spec`.
pub fn draw_disturbance<R: Rng + ?Sized>(spec: &DisturbanceSpec, rng: &mut R) -> Result<Vec<C64>> {
    Ok(DisturbanceModel::new(*spec)?.draw(rng))
}

/// Doppler steering vector `p_k = exp(2πi·d·k/m)`.
pub fn steering(d: usize, m: usize) -> Result<Vec<C64>> {
    if d >= m {
        return Err(Error::invalid(format!("Doppler bin {d} out of range for m = {m}")));
    }
    Ok((0..m)
        .map(|k| C64::from_polar(1.0, 2.0 * PI * ((d * k) % m) as f64 / m as f64))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Phase as a fraction of a full turn, in [0, 1).
    Fixed(f64),
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub d: usize,
    /// Linear signal-to-noise ratio.
    pub snr: f64,
    pub phase: Phase,
}

impl TargetSpec {
    pub fn validate(&self, m: usize) -> Result<()> {
        if self.d >= m {
            return Err(Error::invalid(format!("target bin {} out of range for m = {m}", self.d)));
        }
        if !(self.snr >= 0.0) || !self.snr.is_finite() {
            return Err(Error::invalid(format!("SNR must be finite and nonnegative, got {}", self.snr)));
        }
        if let Phase::Fixed(phi) = self.phase {
            if !(0.0..1.0).contains(&phi) {
                return Err(Error::invalid(format!("phase must lie in [0, 1), got {phi}")));
            }
        }
        Ok(())
    }

    /// Complex amplitude `α = √(SNR/m)·e^{2πiφ}`.
    pub fn amplitude<R: Rng + ?Sized>(&self, m: usize, rng: &mut R) -> C64 {
        let phi = match self.phase {
            Phase::Fixed(phi) => phi,
            Phase::Random => rng.random::<f64>(),
        };
        C64::from_polar((self.snr / m as f64).sqrt(), 2.0 * PI * phi)
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Returns `dist + α·p(d, m)`.
pub fn inject_target<R: Rng + ?Sized>(dist: &[C64], t: &TargetSpec, rng: &mut R) -> Result<Vec<C64>> {
    let m = dist.len();
    t.validate(m)?;
    let alpha = t.amplitude(m, rng);
    let p = steering(t.d, m)?;
    Ok(dist.iter().zip(&p).map(|(z, pk)| z + alpha * pk).collect())
}

/// Complex range × pulse matrix of raw returns.
#[derive(Debug, Clone, PartialEq)]
pub struct RangePulseCube {
    n_ranges: usize,
    n_pulses: usize,
    data: Vec<C64>,
}

impl RangePulseCube {
    pub fn new(n_ranges: usize, n_pulses: usize, data: Vec<C64>) -> Result<Self> {
        if n_ranges == 0 || n_pulses == 0 {
            return Err(Error::invalid("cube dimensions must be positive"));
        }
        if data.len() != n_ranges * n_pulses {
            return Err(Error::invalid(format!(
                "{} samples do not fill a {n_ranges}x{n_pulses} cube",
                data.len()
            )));
        }
        if !crate::linalg::all_finite(&data) {
            return Err(Error::invalid("cube has non-finite samples"));
        }
        Ok(Self {
            n_ranges,
            n_pulses,
            data,
        })
    }

    pub fn zeros(n_ranges: usize, n_pulses: usize) -> Self {
        Self {
            n_ranges,
            n_pulses,
            data: vec![C64::new(0.0, 0.0); n_ranges * n_pulses],
        }
    }

    pub fn n_ranges(&self) -> usize {
        self.n_ranges
    }

    pub fn n_pulses(&self) -> usize {
        self.n_pulses
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn gate(&self, r: usize) -> &[C64] {
        &self.data[r * self.n_pulses..(r + 1) * self.n_pulses]
    }

    pub fn gate_mut(&mut self, r: usize) -> &mut [C64] {
        &mut self.data[r * self.n_pulses..(r + 1) * self.n_pulses]
    }

    /// `Y(r, p:p+m)`.
    pub fn snapshot(&self, r: usize, p: usize, m: usize) -> &[C64] {
        &self.gate(r)[p..p + m]
    }
}

/// A target placed in a cube: the m-pulse window starting at `pulse_offset`
/// of gate `range` receives `α·p(d, m)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacedTarget {
    pub range: usize,
    pub pulse_offset: usize,
    pub target: TargetSpec,
}

/// Simulates a full range-pulse cube.
///
/// Gate `r`, window `w` (pulses `w·m .. (w+1)·m`) draws from the substream
/// `(seed, r, w)` with a fresh texture, so any window can be regenerated alone.
pub fn simulate_cube(
    spec: &DisturbanceSpec,
    n_ranges: usize,
    n_pulses: usize,
    targets: &[PlacedTarget],
    seed: u64,
) -> Result<RangePulseCube> {
    let model = DisturbanceModel::new(*spec)?;
    let m = spec.m;
    if n_ranges == 0 || n_pulses == 0 {
        return Err(Error::invalid("cube dimensions must be positive"));
    }
    for (i, t) in targets.iter().enumerate() {
        t.target.validate(m)?;
        if t.range >= n_ranges || t.pulse_offset + m > n_pulses {
            return Err(Error::invalid(format!(
                "target {i} at gate {} pulses {}..{} does not fit a {n_ranges}x{n_pulses} cube",
                t.range,
                t.pulse_offset,
                t.pulse_offset + m
            )));
        }
        for (j, u) in targets[..i].iter().enumerate() {
            let overlap = u.range == t.range
                && u.pulse_offset < t.pulse_offset + m
                && t.pulse_offset < u.pulse_offset + m;
            if overlap {
                return Err(Error::invalid(format!(
                    "targets {j} and {i} overlap at gate {}",
                    t.range
                )));
            }
        }
    }

    let mut cube = RangePulseCube::zeros(n_ranges, n_pulses);
    let windows = n_pulses.div_ceil(m);
    for r in 0..n_ranges {
        let gate = cube.gate_mut(r);
        for w in 0..windows {
            let mut rng = substream(seed, &[DOMAIN_CUBE, r as u64, w as u64]);
            let snap = model.draw(&mut rng);
            let start = w * m;
            let end = (start + m).min(n_pulses);
            gate[start..end].copy_from_slice(&snap[..end - start]);
        }
    }
    for (i, t) in targets.iter().enumerate() {
        let mut rng = substream(derive_seed(seed, &[DOMAIN_TARGET]), &[i as u64]);
        let alpha = t.target.amplitude(m, &mut rng);
        let p = steering(t.target.d, m)?;
        let gate = cube.gate_mut(t.range);
        for (k, pk) in p.iter().enumerate() {
            gate[t.pulse_offset + k] += alpha * pk;
        }
    }
    Ok(cube)
}
