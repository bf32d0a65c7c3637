//! Local whitening of slow-time snapshots and cube-file ingestion.
//!
//! Each snapshot `y = Y(r, p:p+m)` is whitened with a ridge-regularized SCM
//! built from neighbouring range gates (gate `r` and its guard band excluded)
//! and mapped to a unitary Doppler profile.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::covest::{scm, CovarianceEstimate, EstimateKind};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, herm_inv_sqrt, CMatrix, DftPlan, C64, DEFAULT_EIG_FLOOR};
use crate::sim::RangePulseCube;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SnapshotIndex {
    pub r: usize,
    pub p: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhitenConfig {
    pub m: usize,
    pub stride: usize,
    pub n_adj: usize,
    pub guard: usize,
    pub eps_ridge: f64,
}

impl Default for WhitenConfig {
    fn default() -> Self {
        Self {
            m: 16,
            stride: 16,
            n_adj: 32,
            guard: 0,
            eps_ridge: 1e-2,
        }
    }
}

impl WhitenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.stride == 0 {
            return Err(Error::invalid("snapshot length and stride must be positive"));
        }
        if self.n_adj == 0 {
            return Err(Error::invalid("neighborhood size must be at least 1"));
        }
        if !(self.eps_ridge > 0.0 && self.eps_ridge.is_finite()) {
            return Err(Error::invalid(format!(
                "ridge parameter must be positive, got {}",
                self.eps_ridge
            )));
        }
        Ok(())
    }

    /// Gates on each side of the cell under test.
    pub fn half_width(&self) -> usize {
        self.n_adj.div_ceil(2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DopplerProfile {
    pub bins: Vec<C64>,
    pub origin: SnapshotIndex,
    pub whitened: bool,
}

impl DopplerProfile {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub index: SnapshotIndex,
    pub data: Vec<C64>,
}

fn starts(n_pulses: usize, m: usize, stride: usize) -> Result<impl Iterator<Item = usize>> {
    if m == 0 || stride == 0 {
        return Err(Error::invalid("snapshot length and stride must be positive"));
    }
    if n_pulses < m {
        return Err(Error::invalid(format!(
            "{n_pulses} pulses cannot hold a snapshot of length {m}"
        )));
    }
    Ok((0..=(n_pulses - m)).step_by(stride))
}

/// Snapshots at `p ∈ {0, stride, 2·stride, …}` of every gate, gate-major.
pub fn segment(cube: &RangePulseCube, m: usize, stride: usize) -> Result<Vec<Snapshot>> {
    let ps: Vec<usize> = starts(cube.n_pulses(), m, stride)?.collect();
    let mut out = Vec::with_capacity(cube.n_ranges() * ps.len());
    for r in 0..cube.n_ranges() {
        for &p in &ps {
            out.push(Snapshot {
                index: SnapshotIndex { r, p },
                data: cube.snapshot(r, p, m).to_vec(),
            });
        }
    }
    Ok(out)
}

/// Reference gates for `r`: `⌈n_adj/2⌉` on each side beyond the guard band,
/// clipped at the cube edges.
pub fn neighborhood(r: usize, n_ranges: usize, cfg: &WhitenConfig) -> Vec<usize> {
    let h = cfg.half_width();
    let near = cfg.guard + 1;
    let left = (r.saturating_sub(cfg.guard + h)..r.saturating_sub(cfg.guard)).filter(|&g| g + near <= r);
    let right = (r + near..=r + cfg.guard + h).filter(|&g| g < n_ranges);
    left.chain(right).collect()
}

/// Ridge-regularized SCM over every snapshot of the reference gates of `r`.
pub fn local_covariance(
    snapshots: &[Snapshot],
    r: usize,
    n_ranges: usize,
    cfg: &WhitenConfig,
) -> Result<CovarianceEstimate> {
    cfg.validate()?;
    let gates = neighborhood(r, n_ranges, cfg);
    let reference: Vec<&[C64]> = snapshots
        .iter()
        .filter(|s| gates.binary_search(&s.index.r).is_ok())
        .map(|s| s.data.as_slice())
        .collect();
    if reference.is_empty() {
        return Err(Error::InsufficientData(format!(
            "gate {r} has no reference snapshots (n_adj={}, guard={}, {n_ranges} gates)",
            cfg.n_adj, cfg.guard
        )));
    }
    scm(&reference)?.regularized(cfg.eps_ridge)
}

/// `R^{-1/2}` followed by the unitary DFT.
#[derive(Debug, Clone)]
pub struct Whitener {
    inv_sqrt: CMatrix,
    plan: DftPlan,
}

impl Whitener {
    pub fn new(r_reg: &CovarianceEstimate) -> Result<Self> {
        let inv_sqrt = herm_inv_sqrt(&r_reg.matrix, DEFAULT_EIG_FLOOR)?.into_matrix();
        if !all_finite(inv_sqrt.as_slice()) {
            return Err(Error::SingularMatrix("non-finite inverse square root".into()));
        }
        Ok(Self {
            inv_sqrt,
            plan: DftPlan::new(r_reg.dim())?,
        })
    }

    /// Identity whitening: only the Doppler transform is applied.
    pub fn identity(m: usize) -> Result<Self> {
        Ok(Self {
            inv_sqrt: CMatrix::identity(m),
            plan: DftPlan::new(m)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.plan.len()
    }

    pub fn whiten(&self, y: &[C64]) -> Result<Vec<C64>> {
        self.inv_sqrt.mul_vec(y)
    }

    pub fn apply(&self, y: &[C64]) -> Result<Vec<C64>> {
        Ok(self.plan.forward(&self.whiten(y)?))
    }
}

/// `DFT_unitary(R_reg^{-1/2}·y)`.
pub fn whiten_profile(
    y: &[C64],
    r_reg: &CovarianceEstimate,
    origin: SnapshotIndex,
) -> Result<DopplerProfile> {
    let w = Whitener::new(r_reg)?;
    Ok(DopplerProfile {
        bins: w.apply(y)?,
        origin,
        whitened: true,
    })
}

/// Unwhitened Doppler profile `DFT_unitary(y)`.
pub fn raw_profile(y: &[C64], origin: SnapshotIndex) -> Result<DopplerProfile> {
    Ok(DopplerProfile {
        bins: crate::linalg::dft_unitary(y)?,
        origin,
        whitened: false,
    })
}

/// Whitened profile of one snapshot, using that gate's local covariance.
pub fn whiten_snapshot(
    cube: &RangePulseCube,
    index: SnapshotIndex,
    cfg: &WhitenConfig,
) -> Result<DopplerProfile> {
    cfg.validate()?;
    if index.r >= cube.n_ranges() || index.p + cfg.m > cube.n_pulses() {
        return Err(Error::invalid(format!(
            "snapshot ({}, {}) does not fit a {}x{} cube",
            index.r,
            index.p,
            cube.n_ranges(),
            cube.n_pulses()
        )));
    }
    let gates = neighborhood(index.r, cube.n_ranges(), cfg);
    let mut reference = Vec::new();
    for &g in &gates {
        for p in starts(cube.n_pulses(), cfg.m, cfg.stride)? {
            reference.push(cube.snapshot(g, p, cfg.m));
        }
    }
    if reference.is_empty() {
        return Err(Error::InsufficientData(format!("gate {} has no reference gates", index.r)));
    }
    let r_reg = scm(&reference)?.regularized(cfg.eps_ridge)?;
    whiten_profile(cube.snapshot(index.r, index.p, cfg.m), &r_reg, index)
}

/// Whitened profiles of every snapshot of the cube, gate-major.
pub fn whiten_cube(cube: &RangePulseCube, cfg: &WhitenConfig) -> Result<Vec<DopplerProfile>> {
    cfg.validate()?;
    let snaps = segment(cube, cfg.m, cfg.stride)?;
    let per_gate = snaps.len() / cube.n_ranges();
    let mut out = Vec::with_capacity(snaps.len());
    for r in 0..cube.n_ranges() {
        let r_reg = local_covariance(&snaps, r, cube.n_ranges(), cfg)?;
        debug_assert_eq!(r_reg.kind, EstimateKind::RidgeRegularized);
        let w = Whitener::new(&r_reg)?;
        for s in &snaps[r * per_gate..(r + 1) * per_gate] {
            out.push(DopplerProfile {
                bins: w.apply(&s.data)?,
                origin: s.index,
                whitened: true,
            });
        }
    }
    Ok(out)
}

const CUBE_MAGIC: [u8; 4] = *b"CPXC";
const CUBE_VERSION: u32 = 1;
const HEADER_LEN: u64 = 16;
/// Largest payload accepted from an untrusted header (2³⁰ cells, 8 GiB).
pub const MAX_CUBE_CELLS: u64 = 1 << 30;

fn read_u32<R: Read>(r: &mut R, offset: u64) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::format(offset, "truncated header"))?;
    Ok(u32::from_le_bytes(b))
}

/// Decodes a cube; `available` is the payload length when known (for files).
pub fn decode_cube<R: Read>(mut reader: R, available: Option<u64>) -> Result<RangePulseCube> {
    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::format(0, "truncated header"))?;
    if magic != CUBE_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut reader, 4)?;
    if version != CUBE_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let n_ranges = read_u32(&mut reader, 8)? as u64;
    let n_pulses = read_u32(&mut reader, 12)? as u64;
    let cells = n_ranges
        .checked_mul(n_pulses)
        .filter(|&c| c > 0 && c <= MAX_CUBE_CELLS)
        .ok_or_else(|| {
            Error::format(8, format!("dimensions {n_ranges}x{n_pulses} out of bounds"))
        })?;
    let need = cells * 8;
    if let Some(avail) = available {
        if avail != need {
            return Err(Error::format(
                HEADER_LEN + avail.min(need),
                format!("payload holds {avail} bytes, header requires {need}"),
            ));
        }
    }
    let mut raw = Vec::new();
    reader
        .take(need)
        .read_to_end(&mut raw)
        .map_err(Error::Io)?;
    if (raw.len() as u64) < need {
        return Err(Error::format(
            HEADER_LEN + raw.len() as u64,
            format!("truncated payload: {} of {need} bytes", raw.len()),
        ));
    }
    let data: Vec<C64> = raw
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            C64::new(re as f64, im as f64)
        })
        .collect();
    RangePulseCube::new(n_ranges as usize, n_pulses as usize, data)
        .map_err(|e| Error::format(HEADER_LEN, e.to_string()))
}

/// Encodes a cube; samples are narrowed to f32.
pub fn encode_cube<W: Write>(cube: &RangePulseCube, mut w: W) -> Result<()> {
    let dims = |n: usize| {
        u32::try_from(n).map_err(|_| Error::invalid(format!("dimension {n} exceeds u32")))
    };
    w.write_all(&CUBE_MAGIC)?;
    w.write_all(&CUBE_VERSION.to_le_bytes())?;
    w.write_all(&dims(cube.n_ranges())?.to_le_bytes())?;
    w.write_all(&dims(cube.n_pulses())?.to_le_bytes())?;
    for v in cube.data() {
        w.write_all(&(v.re as f32).to_le_bytes())?;
        w.write_all(&(v.im as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<RangePulseCube> {
    let f = File::open(path)?;
    let len = f.metadata()?.len();
    decode_cube(BufReader::new(f), Some(len.saturating_sub(HEADER_LEN)))
}

pub fn write_cube(cube: &RangePulseCube, path: impl AsRef<Path>) -> Result<()> {
    encode_cube(cube, BufWriter::new(File::create(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dft_unitary, norm_sqr, toeplitz};
    use crate::rng::{complex_normal, substream};
    use crate::sim::{
        db_to_linear, simulate_cube, DisturbanceKind, DisturbanceModel, DisturbanceSpec, Phase,
        PlacedTarget, TargetSpec,
    };
    use proptest::prelude::*;

    fn noise_cube(n_ranges: usize, n_pulses: usize, seed: u64) -> RangePulseCube {
        let mut rng = substream(seed, &[]);
        let data = (0..n_ranges * n_pulses).map(|_| complex_normal(&mut rng)).collect();
        RangePulseCube::new(n_ranges, n_pulses, data).unwrap()
    }

    fn empirical_cov(v: &[Vec<C64>]) -> CMatrix {
        scm(v).unwrap().matrix.into_matrix()
    }

    #[test]
    fn segment_counts() {
        let c = noise_cube(3, 16, 1);
        assert_eq!(segment(&c, 16, 1).unwrap().len(), 3);
        let c = noise_cube(2, 64, 1);
        let s = segment(&c, 16, 16).unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!(s[1].index, SnapshotIndex { r: 0, p: 16 });
        assert_eq!(s[1].data, c.snapshot(0, 16, 16));
        assert_eq!(segment(&c, 16, 1).unwrap().len(), 2 * 49);
        assert!(matches!(segment(&noise_cube(1, 8, 1), 16, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn neighborhood_shape() {
        let cfg = WhitenConfig {
            n_adj: 4,
            ..Default::default()
        };
        assert_eq!(neighborhood(5, 20, &cfg), vec![3, 4, 6, 7]);
        assert_eq!(neighborhood(0, 20, &cfg), vec![1, 2]);
        assert_eq!(neighborhood(19, 20, &cfg), vec![17, 18]);
        let guarded = WhitenConfig { guard: 1, ..cfg.clone() };
        assert_eq!(neighborhood(5, 20, &guarded), vec![2, 3, 7, 8]);
        assert_eq!(neighborhood(1, 20, &guarded), vec![3, 4]);
        let odd = WhitenConfig { n_adj: 3, ..cfg };
        assert_eq!(neighborhood(5, 20, &odd), vec![3, 4, 6, 7]);
    }

    proptest! {
        #[test]
        fn neighborhood_never_empty(n_ranges in 2usize..60, r_frac in 0.0f64..1.0, n_adj in 1usize..40) {
            let r = ((n_ranges as f64 * r_frac) as usize).min(n_ranges - 1);
            let cfg = WhitenConfig { n_adj, ..Default::default() };
            let g = neighborhood(r, n_ranges, &cfg);
            prop_assert!(!g.is_empty());
            prop_assert!(!g.contains(&r));
            prop_assert!(g.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(g.iter().all(|&x| x < n_ranges && x.abs_diff(r) <= cfg.half_width()));
        }
    }

    #[test]
    fn local_covariance_edge_clipping_and_errors() {
        let c = noise_cube(10, 32, 2);
        let cfg = WhitenConfig {
            n_adj: 4,
            ..Default::default()
        };
        let snaps = segment(&c, 16, 16).unwrap();
        assert_eq!(local_covariance(&snaps, 0, 10, &cfg).unwrap().k_samples, 4);
        assert_eq!(local_covariance(&snaps, 5, 10, &cfg).unwrap().k_samples, 8);
        let one = noise_cube(1, 16, 2);
        let snaps = segment(&one, 16, 16).unwrap();
        assert!(matches!(
            local_covariance(&snaps, 0, 1, &cfg),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn local_covariance_of_white_noise() {
        let c = noise_cube(401, 16 * 64, 3);
        let cfg = WhitenConfig {
            n_adj: 400,
            ..Default::default()
        };
        let snaps = segment(&c, 16, 16).unwrap();
        let est = local_covariance(&snaps, 200, 401, &cfg).unwrap();
        assert_eq!(est.k_samples, 400 * 64);
        let target = CMatrix::identity(16).scale(1.0 + cfg.eps_ridge);
        let err = est.matrix.as_matrix().relative_frobenius_error(&target);
        assert!(err < 0.05, "{err}");
    }

    #[test]
    fn target_at_cut_leaves_local_covariance_unchanged() {
        let spec = DisturbanceSpec::new(DisturbanceKind::Ccgn, 0.5, 1.0, 0.1, 16);
        let cfg = WhitenConfig::default();
        let clean = simulate_cube(&spec, 33, 16, &[], 4).unwrap();
        let target = PlacedTarget {
            range: 16,
            pulse_offset: 0,
            target: TargetSpec {
                d: 3,
                snr: 1e4,
                phase: Phase::Random,
            },
        };
        let dirty = simulate_cube(&spec, 33, 16, &[target], 4).unwrap();
        assert_ne!(clean.gate(16), dirty.gate(16));
        let a = local_covariance(&segment(&clean, 16, 16).unwrap(), 16, 33, &cfg).unwrap();
        let b = local_covariance(&segment(&dirty, 16, 16).unwrap(), 16, 33, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn identity_whitening_is_plain_dft() {
        let mut rng = substream(5, &[]);
        let y: Vec<C64> = (0..16).map(|_| complex_normal(&mut rng)).collect();
        let ident = CovarianceEstimate::oracle(crate::linalg::HermitianMatrix::identity(16));
        let o = SnapshotIndex { r: 0, p: 0 };
        let prof = whiten_profile(&y, &ident, o).unwrap();
        let reference = dft_unitary(&y).unwrap();
        for (a, b) in prof.bins.iter().zip(&reference) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!(prof.whitened);
        assert!(!raw_profile(&y, o).unwrap().whitened);
    }

    #[test]
    fn doppler_step_preserves_norm() {
        let t = toeplitz(0.5, 16).unwrap();
        let w = Whitener::new(&CovarianceEstimate::oracle(t)).unwrap();
        let mut rng = substream(6, &[]);
        for _ in 0..100 {
            let y: Vec<C64> = (0..16).map(|_| complex_normal(&mut rng)).collect();
            let yw = w.whiten(&y).unwrap();
            let z = w.apply(&y).unwrap();
            assert!((norm_sqr(&yw) - norm_sqr(&z)).abs() < 1e-12 * norm_sqr(&yw));
        }
    }

    #[test]
    fn oracle_whitening_yields_identity_covariance() {
        let spec = DisturbanceSpec::new(DisturbanceKind::Cgn, 0.5, 1.0, 0.0, 16);
        let model = DisturbanceModel::new(spec).unwrap();
        let w = Whitener::new(&CovarianceEstimate::oracle(spec.true_covariance().unwrap())).unwrap();
        let mut rng = substream(7, &[]);
        let out: Vec<Vec<C64>> = (0..100_000)
            .map(|_| w.whiten(&model.draw(&mut rng)).unwrap())
            .collect();
        let id = CMatrix::identity(16);
        let e4 = empirical_cov(&out[..10_000]).relative_frobenius_error(&id);
        let e5 = empirical_cov(&out).relative_frobenius_error(&id);
        assert!(e4 < 0.05, "{e4}");
        assert!(e5 < 0.02, "{e5}");
    }

    #[test]
    fn strong_target_peak_survives_whitening() {
        let spec = DisturbanceSpec::new(DisturbanceKind::Cgn, 0.5, 1.0, 0.1, 16);
        for d in 0..16 {
            let target = PlacedTarget {
                range: 16,
                pulse_offset: 0,
                target: TargetSpec {
                    d,
                    snr: db_to_linear(60.0),
                    phase: Phase::Random,
                },
            };
            let cube = simulate_cube(&spec, 33, 16, &[target], 8 + d as u64).unwrap();
            let prof =
                whiten_snapshot(&cube, SnapshotIndex { r: 16, p: 0 }, &WhitenConfig::default())
                    .unwrap();
            let peak = (0..16)
                .max_by(|&a, &b| prof.bins[a].norm().total_cmp(&prof.bins[b].norm()))
                .unwrap();
            assert_eq!(peak, d);
        }
    }

    #[test]
    fn whiten_cube_matches_per_snapshot_path() {
        let spec = DisturbanceSpec::new(DisturbanceKind::Ccgn, 0.5, 1.0, 0.1, 16);
        let cube = simulate_cube(&spec, 12, 48, &[], 9).unwrap();
        let cfg = WhitenConfig {
            n_adj: 6,
            ..Default::default()
        };
        let all = whiten_cube(&cube, &cfg).unwrap();
        assert_eq!(all.len(), 12 * 3);
        for prof in all.iter().step_by(5) {
            let single = whiten_snapshot(&cube, prof.origin, &cfg).unwrap();
            for (a, b) in prof.bins.iter().zip(&single.bins) {
                assert!((a - b).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn cube_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cpxc");
        let mut rng = substream(10, &[]);
        let data = (0..8 * 64)
            .map(|_| {
                let v = complex_normal(&mut rng);
                C64::new(v.re as f32 as f64, v.im as f32 as f64)
            })
            .collect();
        let cube = RangePulseCube::new(8, 64, data).unwrap();
        write_cube(&cube, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 16 + 8 * 64 * 8);
        let back = read_cube(&path).unwrap();
        assert_eq!(back, cube);
        let mut first = Vec::new();
        encode_cube(&back, &mut first).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }

    #[test]
    fn cube_format_errors() {
        let mut header = Vec::new();
        header.extend_from_slice(b"CPXC");
        header.extend_from_slice(&1u32.to_le_bytes());
        header.extend_from_slice(&1_000_000_000u32.to_le_bytes());
        header.extend_from_slice(&1_000_000_000u32.to_le_bytes());
        assert!(matches!(
            decode_cube(header.as_slice(), None),
            Err(Error::Format { offset: 8, .. })
        ));

        let mut bad = header.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            decode_cube(bad.as_slice(), None),
            Err(Error::Format { offset: 0, .. })
        ));

        let mut short = Vec::new();
        encode_cube(&RangePulseCube::zeros(2, 4), &mut short).unwrap();
        short.truncate(short.len() - 3);
        assert!(matches!(
            decode_cube(short.as_slice(), None),
            Err(Error::Format { .. })
        ));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cpxc");
        std::fs::write(&path, &short).unwrap();
        assert!(matches!(read_cube(&path), Err(Error::Format { .. })));
        assert!(matches!(read_cube(dir.path().join("missing")), Err(Error::Io(_))));
    }
}
