//! One Monte Carlo trial: a cell under test with its secondary gates.
//!
//! A trial is a `n_ranges × m` cube drawn from the disturbance model with the
//! cell under test (CUT) in the middle gate. Its randomness comes from a
//! substream keyed by `(seed, environment, split, index)`, so every detector
//! and every (SNR, bin) point sees the same disturbance and target phase.

use std::collections::BTreeMap;

use rand::Rng;
use radar_ood::covest::{scm, tyler_fp, CovarianceEstimate};
use radar_ood::cvae::Cvae;
use radar_ood::detectors::SteeringBank;
use radar_ood::rng::{derive_seed, substream};
use radar_ood::sim::{simulate_cube, steering, DisturbanceKind, DisturbanceSpec, RangePulseCube};
use radar_ood::whiten::{neighborhood, WhitenConfig, Whitener};
use radar_ood::{Error, Result, C64};

use crate::config::{Detector, ExperimentConfig, Preprocessing};

const DOMAIN_TRIAL: u64 = 0x7121;
const DOMAIN_PHASE: u64 = 0x9A5E;

/// H₀ data splits. Each has its own substream key, so no trial is shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Calibrate,
    Test,
    NullTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Calibrate, Split::Test, Split::NullTest];

    pub const fn key(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Calibrate => 2,
            Split::Test => 3,
            Split::NullTest => 4,
        }
    }
}

/// Stable index of an environment in substream keys.
pub fn env_key(kind: DisturbanceKind) -> u64 {
    DisturbanceKind::ALL
        .iter()
        .position(|&k| k == kind)
        .expect("listed kind") as u64
}

/// Seed of trial `index` of `split`.
pub fn trial_seed(master: u64, kind: DisturbanceKind, split: Split, index: u64) -> u64 {
    derive_seed(master, &[DOMAIN_TRIAL, env_key(kind), split.key(), index])
}

/// Gate layout shared by every trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialGeometry {
    pub m: usize,
    pub n_ranges: usize,
    pub cut: usize,
    /// Secondary gates of the adaptive detectors, nearest first.
    pub secondary: Vec<usize>,
    /// Reference gates of local whitening.
    pub reference: Vec<usize>,
}

impl TrialGeometry {
    pub fn new(m: usize, k_secondary: usize, whitening: &WhitenConfig) -> Self {
        let half = k_secondary
            .div_ceil(2)
            .max(whitening.guard + whitening.half_width());
        let n_ranges = 2 * half + 1;
        let cut = half;
        let mut secondary = Vec::with_capacity(k_secondary);
        for off in 1..=half {
            secondary.extend([cut - off, cut + off]);
        }
        secondary.truncate(k_secondary);
        Self {
            m,
            n_ranges,
            cut,
            secondary,
            reference: neighborhood(cut, n_ranges, whitening),
        }
    }
}

/// Which statistics a trial must produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Needs {
    pub oracle: bool,
    pub scm: bool,
    pub tyler: bool,
}

impl Needs {
    pub fn for_config(cfg: &ExperimentConfig) -> Self {
        let has = |d: Detector| cfg.detectors.contains(&d);
        Self {
            oracle: has(Detector::Mf) || has(Detector::Nmf),
            scm: has(Detector::AmfScm) || has(Detector::AnmfScm),
            tyler: has(Detector::AnmfTyler) || has(Detector::Fused),
        }
    }
}

/// Raw statistics of one snapshot. Classical vectors hold one value per
/// Doppler bin and are empty when not requested; the CVAE score is one value
/// per profile.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SnapshotScores {
    pub mf: Vec<f64>,
    pub nmf: Vec<f64>,
    pub amf_scm: Vec<f64>,
    pub anmf_scm: Vec<f64>,
    pub anmf_tyler: Vec<f64>,
    pub cvae: BTreeMap<Preprocessing, f64>,
}

impl SnapshotScores {
    /// Per-bin statistic of a classical detector.
    pub fn classical(&self, detector: Detector) -> &[f64] {
        match detector {
            Detector::Mf => &self.mf,
            Detector::Nmf => &self.nmf,
            Detector::AmfScm => &self.amf_scm,
            Detector::AnmfScm => &self.anmf_scm,
            Detector::AnmfTyler => &self.anmf_tyler,
            Detector::Cvae | Detector::Fused => &[],
        }
    }
}

/// Per-environment state shared by all trials.
#[derive(Debug)]
pub struct TrialEngine<'a> {
    pub kind: DisturbanceKind,
    pub spec: DisturbanceSpec,
    pub geometry: TrialGeometry,
    master: u64,
    k_secondary: usize,
    tyler: radar_ood::covest::TylerConfig,
    whitening: WhitenConfig,
    needs: Needs,
    oracle_bank: SteeringBank,
    oracle_whitener: Whitener,
    raw_whitener: Whitener,
    models: BTreeMap<Preprocessing, &'a Cvae>,
    steering: Vec<Vec<C64>>,
}

/// A drawn trial before any target is injected.
#[derive(Debug)]
pub struct Trial {
    pub cut: Vec<C64>,
    /// Target phase as a fraction of a turn.
    pub phase: f64,
    scm_bank: Option<SteeringBank>,
    tyler_bank: Option<SteeringBank>,
    local: Option<Whitener>,
}

impl<'a> TrialEngine<'a> {
    pub fn new(cfg: &ExperimentConfig, kind: DisturbanceKind, models: BTreeMap<Preprocessing, &'a Cvae>) -> Result<Self> {
        let spec = cfg.disturbance(kind);
        spec.validate()?;
        let whitening = cfg.local_whitening();
        let truth = spec.true_covariance()?;
        let steering = (0..cfg.m).map(|d| steering(d, cfg.m)).collect::<Result<_>>()?;
        Ok(Self {
            kind,
            spec,
            geometry: TrialGeometry::new(cfg.m, cfg.k_secondary, &whitening),
            master: cfg.seed,
            k_secondary: cfg.k_secondary,
            tyler: cfg.tyler,
            whitening,
            needs: Needs::for_config(cfg),
            oracle_bank: SteeringBank::new(&truth)?,
            oracle_whitener: Whitener::new(&CovarianceEstimate::oracle(truth))?,
            raw_whitener: Whitener::identity(cfg.m)?,
            models,
            steering,
        })
    }

    /// Restricts the statistics computed per trial.
    pub fn with_needs(mut self, needs: Needs) -> Self {
        self.needs = needs;
        self
    }

    pub fn m(&self) -> usize {
        self.geometry.m
    }

    pub fn seed(&self, split: Split, index: u64) -> u64 {
        trial_seed(self.master, self.kind, split, index)
    }

    /// The full H₀ cube of a trial.
    pub fn cube(&self, split: Split, index: u64) -> Result<RangePulseCube> {
        let g = &self.geometry;
        simulate_cube(&self.spec, g.n_ranges, g.m, &[], self.seed(split, index))
    }

    /// Draws a trial and fits what its detectors need on the secondary gates.
    pub fn draw(&self, split: Split, index: u64) -> Result<Trial> {
        let cube = self.cube(split, index)?;
        let g = &self.geometry;
        let secondaries: Vec<&[C64]> = g.secondary.iter().map(|&r| cube.gate(r)).collect();
        debug_assert_eq!(secondaries.len(), self.k_secondary);
        let scm_bank = if self.needs.scm {
            Some(SteeringBank::new(&scm(&secondaries)?.matrix)?)
        } else {
            None
        };
        let tyler_bank = if self.needs.tyler {
            Some(SteeringBank::new(&tyler_fp(&secondaries, &self.tyler)?.matrix)?)
        } else {
            None
        };
        let local = if self.models.contains_key(&Preprocessing::Local) {
            Some(self.local_whitener(&cube)?)
        } else {
            None
        };
        let mut rng = substream(self.seed(split, index), &[DOMAIN_PHASE]);
        Ok(Trial {
            cut: cube.gate(g.cut).to_vec(),
            phase: rng.random::<f64>(),
            scm_bank,
            tyler_bank,
            local,
        })
    }

    fn local_whitener(&self, cube: &RangePulseCube) -> Result<Whitener> {
        let reference: Vec<&[C64]> = self.geometry.reference.iter().map(|&r| cube.gate(r)).collect();
        Whitener::new(&scm(&reference)?.regularized(self.whitening.eps_ridge)?)
    }

    /// H₀ profile of the CUT of trial `index`, preprocessed for `mode`.
    pub fn h0_profile(&self, split: Split, index: u64, mode: Preprocessing) -> Result<Vec<C64>> {
        let cube = self.cube(split, index)?;
        let cut = cube.gate(self.geometry.cut);
        match mode {
            Preprocessing::Raw => self.raw_whitener.apply(cut),
            Preprocessing::Oracle => self.oracle_whitener.apply(cut),
            Preprocessing::Local => self.local_whitener(&cube)?.apply(cut),
        }
    }

    /// Doppler profile of `z` as fed to the CVAE of `mode`.
    pub fn profile(&self, trial: &Trial, mode: Preprocessing, z: &[C64]) -> Result<Vec<C64>> {
        match mode {
            Preprocessing::Raw => self.raw_whitener.apply(z),
            Preprocessing::Oracle => self.oracle_whitener.apply(z),
            Preprocessing::Local => trial
                .local
                .as_ref()
                .ok_or_else(|| Error::Dependency("local whitener was not fitted".into()))?
                .apply(z),
        }
    }

    /// `cut + α·p(d)` with `|α|² m = snr` and the trial's phase.
    pub fn with_target(&self, trial: &Trial, snr: f64, d: usize) -> Vec<C64> {
        let m = self.m();
        let alpha = C64::from_polar((snr / m as f64).sqrt(), std::f64::consts::TAU * trial.phase);
        trial
            .cut
            .iter()
            .zip(&self.steering[d])
            .map(|(z, p)| z + alpha * p)
            .collect()
    }

    /// Every requested statistic of snapshot `z` of `trial`.
    pub fn score(&self, trial: &Trial, z: &[C64]) -> Result<SnapshotScores> {
        let mut out = SnapshotScores::default();
        if self.needs.oracle {
            let s = self.oracle_bank.evaluate(z)?;
            out.mf = s.mf;
            out.nmf = s.nmf;
        }
        if let Some(bank) = &trial.scm_bank {
            let s = bank.evaluate(z)?;
            out.amf_scm = s.mf;
            out.anmf_scm = s.nmf;
        }
        if let Some(bank) = &trial.tyler_bank {
            out.anmf_tyler = bank.evaluate(z)?.nmf;
        }
        for (&mode, model) in &self.models {
            let profile = self.profile(trial, mode, z)?;
            out.cvae.insert(mode, model.recon_score(&profile)?);
        }
        Ok(out)
    }
}
