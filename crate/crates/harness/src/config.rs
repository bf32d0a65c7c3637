//! Experiment configuration, read from TOML.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use radar_ood::calib::SigmoidSpread;
use radar_ood::covest::TylerConfig;
use radar_ood::cvae::{CvaeArchitecture, TrainConfig};
use radar_ood::sim::{DisturbanceKind, DisturbanceSpec};
use radar_ood::whiten::WhitenConfig;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Detector {
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
    #[serde(rename = "CVAE")]
    Cvae,
    #[serde(rename = "Fused")]
    Fused,
}

impl Detector {
    pub const ALL: [Detector; 7] = [
        Detector::Mf,
        Detector::Nmf,
        Detector::AmfScm,
        Detector::AnmfScm,
        Detector::AnmfTyler,
        Detector::Cvae,
        Detector::Fused,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Detector::Mf => "MF",
            Detector::Nmf => "NMF",
            Detector::AmfScm => "AMF-SCM",
            Detector::AnmfScm => "ANMF-SCM",
            Detector::AnmfTyler => "ANMF-Tyler",
            Detector::Cvae => "CVAE",
            Detector::Fused => "Fused",
        }
    }

    /// Detectors fed by the learned model, one instance per preprocessing mode.
    pub fn is_learned(self) -> bool {
        matches!(self, Detector::Cvae | Detector::Fused)
    }
}

impl fmt::Display for Detector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Detector {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| HarnessError::config(format!("unknown detector '{s}'")))
    }
}

/// What the CVAE sees: the raw Doppler profile, or the profile after
/// whitening with the local SCM or the true covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preprocessing {
    Raw,
    Local,
    Oracle,
}

impl Preprocessing {
    pub const ALL: [Preprocessing; 3] = [Preprocessing::Raw, Preprocessing::Local, Preprocessing::Oracle];

    pub fn label(self) -> &'static str {
        match self {
            Preprocessing::Raw => "raw",
            Preprocessing::Local => "local",
            Preprocessing::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Preprocessing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Preprocessing {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| HarnessError::config(format!("unknown preprocessing '{s}'")))
    }
}

/// A reported detector instance. Classical detectors always run on the raw
/// snapshot; CVAE and fusion carry the preprocessing of their CVAE branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Channel {
    pub detector: Detector,
    pub preprocessing: Preprocessing,
}

impl Channel {
    pub fn new(detector: Detector, preprocessing: Preprocessing) -> Self {
        Self {
            detector,
            preprocessing,
        }
    }

    pub fn classical(detector: Detector) -> Self {
        Self::new(detector, Preprocessing::Raw)
    }

    /// File-name friendly key, e.g. `anmf-tyler_raw`.
    pub fn slug(&self) -> String {
        format!("{}_{}", self.detector.label().to_ascii_lowercase(), self.preprocessing)
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.detector, self.preprocessing)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClutterParams {
    /// Speckle correlation coefficient.
    pub rho: f64,
    /// Gamma texture shape.
    pub mu_texture: f64,
    /// Thermal noise power, used by the environments that include AWGN.
    pub sigma_n2: f64,
}

impl Default for ClutterParams {
    fn default() -> Self {
        Self {
            rho: 0.5,
            mu_texture: 1.0,
            sigma_n2: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleChoice {
    Sigmoid,
    GaussianPrior,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightConfig {
    pub schedule: ScheduleChoice,
    /// Reference bin of the Gaussian prior.
    pub b0: usize,
    /// Width of the Gaussian prior in bins.
    pub sigma0: f64,
    pub spread: SigmoidSpread,
    /// Weight of the constant schedule.
    pub value: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleChoice::GaussianPrior,
            b0: 0,
            sigma0: 1.5,
            spread: SigmoidSpread::StdDev,
            value: 0.5,
        }
    }
}

/// Neighborhood of the local whitening step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalWhitening {
    pub n_adj: usize,
    pub guard: usize,
    pub eps_ridge: f64,
}

impl Default for LocalWhitening {
    fn default() -> Self {
        Self {
            n_adj: 32,
            guard: 0,
            eps_ridge: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Worker threads; 0 uses every available core.
    pub jobs: usize,
    pub m: usize,
    /// Secondary snapshots of the adaptive detectors.
    pub k_secondary: usize,
    pub pfa: f64,
    pub environments: Vec<DisturbanceKind>,
    pub clutter: ClutterParams,
    pub snr_db: Vec<f64>,
    pub doppler_bins: Vec<usize>,
    /// H₁ trials per (SNR, bin) point.
    pub trials: usize,
    /// H₀ trials behind every calibration bank.
    pub calibration_trials: usize,
    /// Held-out H₀ trials for the false-alarm audit; 0 skips it.
    pub null_trials: usize,
    pub train_profiles: usize,
    pub detectors: Vec<Detector>,
    pub preprocessing: Vec<Preprocessing>,
    pub weights: WeightConfig,
    pub whitening: LocalWhitening,
    pub tyler: TylerConfig,
    pub cvae: CvaeArchitecture,
    /// `training.seed` is ignored: it is derived from `seed`. Keys left out
    /// keep the values of [`default_training`].
    #[serde(deserialize_with = "training_over_default")]
    pub training: TrainConfig,
}

/// Training defaults of an experiment: the library defaults with `β = 1`.
///
/// At smaller `β` the default latent keeps enough dimensions to reconstruct
/// targets a few bins off the clutter ridge, which then go undetected.
pub fn default_training() -> TrainConfig {
    TrainConfig {
        beta: 1.0,
        ..TrainConfig::default()
    }
}

fn training_over_default<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    use serde::de::Error as _;
    let user = toml::Table::deserialize(d)?;
    let mut merged = toml::Table::try_from(default_training()).map_err(D::Error::custom)?;
    merged.extend(user);
    merged.try_into().map_err(D::Error::custom)
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("out"),
            jobs: 0,
            m: 16,
            k_secondary: 32,
            pfa: 1e-2,
            environments: vec![
                DisturbanceKind::CgnAwgn,
                DisturbanceKind::Ccgn,
                DisturbanceKind::CcgnAwgn,
            ],
            clutter: ClutterParams::default(),
            snr_db: (-5..=30).map(f64::from).collect(),
            doppler_bins: (0..16).collect(),
            trials: 10_000,
            calibration_trials: 100_000,
            null_trials: 100_000,
            train_profiles: 10_000,
            detectors: Detector::ALL.to_vec(),
            preprocessing: vec![Preprocessing::Raw],
            weights: WeightConfig::default(),
            whitening: LocalWhitening::default(),
            tyler: TylerConfig {
                tol: 1e-6,
                max_iter: 500,
            },
            cvae: CvaeArchitecture::default(),
            training: default_training(),
        }
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(HarnessError::Config(msg()))
    }
}

fn unique<T: Ord + Copy>(items: &[T]) -> bool {
    items.iter().copied().collect::<BTreeSet<_>>().len() == items.len()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m;
        ensure(m >= 2, || format!("m = {m} is too short"))?;
        ensure(self.k_secondary > m, || {
            format!("k_secondary = {} must exceed m = {m} for the Tyler estimate to exist", self.k_secondary)
        })?;
        ensure(self.pfa > 0.0 && self.pfa < 1.0, || format!("pfa = {} outside (0, 1)", self.pfa))?;
        let min_trials = (10.0 / self.pfa).ceil() as usize;
        ensure(self.trials >= min_trials, || {
            format!("trials = {} below 10/pfa = {min_trials}", self.trials)
        })?;
        ensure(self.calibration_trials >= min_trials, || {
            format!("calibration_trials = {} below 10/pfa = {min_trials}", self.calibration_trials)
        })?;
        ensure(self.null_trials == 0 || self.null_trials >= min_trials, || {
            format!("null_trials = {} below 10/pfa = {min_trials}", self.null_trials)
        })?;

        ensure(!self.environments.is_empty(), || "no environments".into())?;
        ensure(unique(&self.environments.iter().map(|k| k.label()).collect::<Vec<_>>()), || {
            "duplicate environment".into()
        })?;
        for &kind in &self.environments {
            self.disturbance(kind)
                .validate()
                .map_err(|e| HarnessError::config(format!("{kind}: {e}")))?;
        }

        ensure(!self.snr_db.is_empty(), || "empty SNR grid".into())?;
        ensure(self.snr_db.iter().all(|s| s.is_finite()), || "non-finite SNR".into())?;
        ensure(self.snr_db.windows(2).all(|w| w[0] < w[1]), || {
            "SNR grid must be strictly increasing".into()
        })?;
        ensure(!self.doppler_bins.is_empty(), || "empty Doppler grid".into())?;
        ensure(self.doppler_bins.iter().all(|&d| d < m), || format!("Doppler bin outside 0..{m}"))?;
        ensure(unique(&self.doppler_bins), || "duplicate Doppler bin".into())?;

        ensure(!self.detectors.is_empty(), || "empty detector roster".into())?;
        ensure(unique(&self.detectors), || "duplicate detector".into())?;
        ensure(!self.preprocessing.is_empty(), || "no preprocessing mode".into())?;
        ensure(unique(&self.preprocessing), || "duplicate preprocessing mode".into())?;
        if self.needs_cvae() {
            ensure(self.train_profiles > 0, || "train_profiles must be positive".into())?;
            ensure(self.cvae.input_len == m, || {
                format!("cvae.input_len = {} differs from m = {m}", self.cvae.input_len)
            })?;
            self.cvae.validate().map_err(|e| HarnessError::config(format!("cvae: {e}")))?;
            self.training
                .validate()
                .map_err(|e| HarnessError::config(format!("training: {e}")))?;
        }
        if self.preprocessing.contains(&Preprocessing::Local) {
            self.local_whitening()
                .validate()
                .map_err(|e| HarnessError::config(format!("whitening: {e}")))?;
        }

        let w = &self.weights;
        ensure(w.b0 < m, || format!("weights.b0 = {} outside 0..{m}", w.b0))?;
        ensure(w.sigma0 > 0.0 && w.sigma0.is_finite(), || {
            format!("weights.sigma0 = {} must be positive", w.sigma0)
        })?;
        ensure((0.0..=1.0).contains(&w.value), || format!("weights.value = {} outside [0, 1]", w.value))?;
        ensure(self.tyler.tol > 0.0 && self.tyler.max_iter > 0, || {
            "tyler.tol and tyler.max_iter must be positive".into()
        })?;
        Ok(())
    }

    pub fn disturbance(&self, kind: DisturbanceKind) -> DisturbanceSpec {
        let c = &self.clutter;
        DisturbanceSpec::new(kind, c.rho, c.mu_texture, c.sigma_n2, self.m)
    }

    pub fn local_whitening(&self) -> WhitenConfig {
        WhitenConfig {
            m: self.m,
            stride: self.m,
            n_adj: self.whitening.n_adj,
            guard: self.whitening.guard,
            eps_ridge: self.whitening.eps_ridge,
        }
    }

    pub fn needs_cvae(&self) -> bool {
        self.detectors.iter().any(|d| d.is_learned())
    }

    /// Every reported channel, in report order.
    pub fn channels(&self) -> Vec<Channel> {
        let mut out = Vec::new();
        for &d in &self.detectors {
            if d.is_learned() {
                out.extend(self.preprocessing.iter().map(|&p| Channel::new(d, p)));
            } else {
                out.push(Channel::classical(d));
            }
        }
        out.sort();
        out
    }

    /// Worker count after resolving 0 to the machine's parallelism.
    pub fn workers(&self) -> usize {
        if self.jobs > 0 {
            self.jobs
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }

    /// Output directory of one environment.
    pub fn env_dir(&self, kind: DisturbanceKind) -> PathBuf {
        self.out_dir.join(kind.label().replace('+', "_"))
    }
}
