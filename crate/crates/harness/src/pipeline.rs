//! Stage drivers. Every stage reads its inputs from, and writes its outputs
//! to, the per-environment directory under `out_dir`:
//!
//! | stage     | writes                                                        |
//! |-----------|---------------------------------------------------------------|
//! | simulate  | `config.toml`, `<env>/train_<mode>.cube`                      |
//! | train     | `<env>/cvae_<mode>.ckpt`, `<env>/loss_<mode>.csv`             |
//! | calibrate | `<env>/calibration/<channel>.calb` and `.csv` summaries       |
//! | detect    | `<env>/surfaces.csv`, `<env>/false_alarms.csv`                |
//! | report    | `<env>/pd_<channel>.svg`, `<env>/pd_snr_binNN.svg`            |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use radar_ood::calib::{Calibration, ThresholdTable};
use radar_ood::cvae::{load_checkpoint, save_checkpoint, train, write_loss_trace, Checkpoint, Cvae, EpochLoss};
use radar_ood::rng::{derive_seed, substream};
use radar_ood::sim::{DisturbanceKind, RangePulseCube};
use radar_ood::whiten::{read_cube, write_cube};
use radar_ood::{Error, C64};
use rayon::prelude::*;

use crate::calibrate::{calibrate, collect_null, EnvCalibration};
use crate::config::{Channel, Detector, ExperimentConfig, Preprocessing};
use crate::error::{HarnessError, Result, Stage, StageContext};
use crate::montecarlo::{Evaluator, FalseAlarms, PdSurface};
use crate::report::{emit_report, read_surfaces_csv, write_false_alarms_csv, ReportFormat};
use crate::trial::{env_key, Split, TrialEngine};

const DOMAIN_MODEL: u64 = 0x30DE;

/// Everything one environment produced.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvOutput {
    pub kind: DisturbanceKind,
    pub surfaces: Vec<PdSurface>,
    pub thresholds: BTreeMap<Channel, ThresholdTable>,
    pub loss_traces: BTreeMap<Preprocessing, Vec<EpochLoss>>,
    pub false_alarms: Vec<FalseAlarms>,
}

pub fn thread_pool(cfg: &ExperimentConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers())
        .build()
        .map_err(|e| HarnessError::config(format!("cannot start {} workers: {e}", cfg.workers())))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| HarnessError::io(path, e))
}

fn learned_modes(cfg: &ExperimentConfig) -> Vec<Preprocessing> {
    if cfg.needs_cvae() {
        cfg.preprocessing.clone()
    } else {
        Vec::new()
    }
}

/// Channels that must be calibrated: the roster plus the branches of fusion.
pub fn calibrated_channels(cfg: &ExperimentConfig) -> Vec<Channel> {
    let mut out = cfg.channels();
    for ch in cfg.channels() {
        if ch.detector == Detector::Fused {
            out.push(Channel::classical(Detector::AnmfTyler));
            out.push(Channel::new(Detector::Cvae, ch.preprocessing));
        }
    }
    out.sort();
    out.dedup();
    out
}

fn train_path(cfg: &ExperimentConfig, kind: DisturbanceKind, mode: Preprocessing) -> PathBuf {
    cfg.env_dir(kind).join(format!("train_{mode}.cube"))
}

fn checkpoint_path(cfg: &ExperimentConfig, kind: DisturbanceKind, mode: Preprocessing) -> PathBuf {
    cfg.env_dir(kind).join(format!("cvae_{mode}.ckpt"))
}

fn calibration_path(cfg: &ExperimentConfig, kind: DisturbanceKind, ch: Channel) -> PathBuf {
    cfg.env_dir(kind).join("calibration").join(format!("{}.calb", ch.slug()))
}

/// H₀ training profiles of one environment, from the training split.
pub fn training_set(engine: &TrialEngine, mode: Preprocessing, n: usize) -> radar_ood::Result<Vec<Vec<C64>>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| engine.h0_profile(Split::Train, i, mode))
        .collect()
}

/// Initializes and trains the CVAE of one environment and mode.
pub fn train_model(
    cfg: &ExperimentConfig,
    kind: DisturbanceKind,
    mode: Preprocessing,
    data: &[Vec<C64>],
) -> radar_ood::Result<(Checkpoint, Vec<EpochLoss>)> {
    let key = [DOMAIN_MODEL, env_key(kind), mode as u64];
    let mut model = Cvae::new(cfg.cvae.clone(), &mut substream(cfg.seed, &key))?;
    let mut tc = cfg.training.clone();
    tc.seed = derive_seed(cfg.seed, &key);
    let trace = train(&mut model, data, &tc)?;
    Ok((
        Checkpoint {
            model,
            train_config: tc,
            seed: cfg.seed,
        },
        trace,
    ))
}

pub fn simulate_stage(cfg: &ExperimentConfig, pool: &rayon::ThreadPool) -> Result<()> {
    let err = |e| HarnessError::Stage {
        stage: Stage::Simulate,
        seed: cfg.seed,
        source: e,
    };
    create_dir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(|e| HarnessError::io(&path, e))?;
    for &kind in &cfg.environments {
        create_dir(&cfg.env_dir(kind))?;
        let engine = TrialEngine::new(cfg, kind, BTreeMap::new()).map_err(err)?;
        for mode in learned_modes(cfg) {
            info!("{kind}: simulating {} {mode} training profiles", cfg.train_profiles);
            let data = pool.install(|| training_set(&engine, mode, cfg.train_profiles)).map_err(err)?;
            let flat: Vec<C64> = data.into_iter().flatten().collect();
            let cube = RangePulseCube::new(cfg.train_profiles, cfg.m, flat).map_err(err)?;
            write_cube(&cube, train_path(cfg, kind, mode)).map_err(err)?;
        }
    }
    Ok(())
}

pub fn train_stage(cfg: &ExperimentConfig) -> Result<BTreeMap<DisturbanceKind, BTreeMap<Preprocessing, Vec<EpochLoss>>>> {
    let mut out = BTreeMap::new();
    for &kind in &cfg.environments {
        let mut traces = BTreeMap::new();
        for mode in learned_modes(cfg) {
            let cube = read_cube(train_path(cfg, kind, mode)).stage(Stage::Train, cfg.seed)?;
            if cube.n_pulses() != cfg.m {
                return Err(HarnessError::Stage {
                    stage: Stage::Train,
                    seed: cfg.seed,
                    source: Error::InvalidArgument(format!("training profiles have length {}", cube.n_pulses())),
                });
            }
            let data: Vec<Vec<C64>> = (0..cube.n_ranges()).map(|r| cube.gate(r).to_vec()).collect();
            info!("{kind}: training the {mode} CVAE on {} profiles", data.len());
            let (ck, trace) = train_model(cfg, kind, mode, &data).stage(Stage::Train, cfg.seed)?;
            save_checkpoint(&ck, checkpoint_path(cfg, kind, mode)).stage(Stage::Train, cfg.seed)?;
            let loss = cfg.env_dir(kind).join(format!("loss_{mode}.csv"));
            write_loss_trace(&trace, loss).stage(Stage::Train, cfg.seed)?;
            traces.insert(mode, trace);
        }
        out.insert(kind, traces);
    }
    Ok(out)
}

fn load_models(cfg: &ExperimentConfig, kind: DisturbanceKind, stage: Stage) -> Result<BTreeMap<Preprocessing, Cvae>> {
    learned_modes(cfg)
        .into_iter()
        .map(|mode| {
            let ck = load_checkpoint(checkpoint_path(cfg, kind, mode)).stage(stage, cfg.seed)?;
            if ck.model.architecture() != &cfg.cvae {
                return Err(HarnessError::config(format!(
                    "{kind}: the {mode} checkpoint does not match the configured architecture"
                )));
            }
            Ok((mode, ck.model))
        })
        .collect()
}

fn borrow_models(models: &BTreeMap<Preprocessing, Cvae>) -> BTreeMap<Preprocessing, &Cvae> {
    models.iter().map(|(&k, v)| (k, v)).collect()
}

pub fn calibrate_stage(
    cfg: &ExperimentConfig,
    pool: &rayon::ThreadPool,
) -> Result<BTreeMap<DisturbanceKind, BTreeMap<Channel, ThresholdTable>>> {
    let mut out = BTreeMap::new();
    for &kind in &cfg.environments {
        let models = load_models(cfg, kind, Stage::Calibrate)?;
        let engine = TrialEngine::new(cfg, kind, borrow_models(&models)).stage(Stage::Calibrate, cfg.seed)?;
        info!("{kind}: scoring {} calibration trials", cfg.calibration_trials);
        let null = pool
            .install(|| collect_null(&engine, Split::Calibrate, cfg.calibration_trials))
            .stage(Stage::Calibrate, cfg.seed)?;
        let cal = calibrate(cfg, kind, null).stage(Stage::Calibrate, cfg.seed)?;
        let dir = cfg.env_dir(kind).join("calibration");
        create_dir(&dir)?;
        for (ch, c) in &cal.channels {
            let path = calibration_path(cfg, kind, *ch);
            c.save(&path).stage(Stage::Calibrate, cfg.seed)?;
            let summary = path.with_extension("csv");
            std::fs::write(&summary, c.summary_csv()).map_err(|e| HarnessError::io(&summary, e))?;
        }
        out.insert(
            kind,
            cal.channels.iter().map(|(ch, c)| (*ch, c.thresholds.clone())).collect(),
        );
    }
    Ok(out)
}

fn load_calibration(cfg: &ExperimentConfig, kind: DisturbanceKind) -> Result<EnvCalibration> {
    let mut channels = BTreeMap::new();
    for ch in calibrated_channels(cfg) {
        let path = calibration_path(cfg, kind, ch);
        let c = Calibration::load(&path).stage(Stage::Detect, cfg.seed)?;
        if c.bank.n_bins() != cfg.m || c.thresholds.pfa != cfg.pfa {
            return Err(HarnessError::config(format!(
                "{}: calibrated for {} bins at pfa {}, configured {} at {}",
                path.display(),
                c.bank.n_bins(),
                c.thresholds.pfa,
                cfg.m,
                cfg.pfa
            )));
        }
        channels.insert(ch, c);
    }
    Ok(EnvCalibration { kind, channels })
}

pub fn detect_stage(
    cfg: &ExperimentConfig,
    pool: &rayon::ThreadPool,
) -> Result<BTreeMap<DisturbanceKind, (Vec<PdSurface>, Vec<FalseAlarms>)>> {
    let mut out = BTreeMap::new();
    let channels = cfg.channels();
    for &kind in &cfg.environments {
        let models = load_models(cfg, kind, Stage::Detect)?;
        let cal = load_calibration(cfg, kind)?;
        let engine = TrialEngine::new(cfg, kind, borrow_models(&models)).stage(Stage::Detect, cfg.seed)?;
        let eval = Evaluator::new(&engine, &cal);
        info!(
            "{kind}: {} trials at {} SNR x {} bin points",
            cfg.trials,
            cfg.snr_db.len(),
            cfg.doppler_bins.len()
        );
        let surfaces = pool
            .install(|| eval.sweep(&channels, &cfg.snr_db, &cfg.doppler_bins, cfg.trials))
            .stage(Stage::Detect, cfg.seed)?;
        let dir = cfg.env_dir(kind);
        emit_report(&surfaces, &dir, ReportFormat::Csv)?;
        let false_alarms = if cfg.null_trials > 0 {
            info!("{kind}: auditing false alarms on {} held-out trials", cfg.null_trials);
            let fa = pool
                .install(|| eval.false_alarms(&channels, cfg.null_trials))
                .stage(Stage::Detect, cfg.seed)?;
            write_false_alarms_csv(&fa, &dir.join("false_alarms.csv"))?;
            fa
        } else {
            Vec::new()
        };
        out.insert(kind, (surfaces, false_alarms));
    }
    Ok(out)
}

pub fn report_stage(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for &kind in &cfg.environments {
        let dir = cfg.env_dir(kind);
        let surfaces = read_surfaces_csv(&dir.join("surfaces.csv"))?;
        written.extend(emit_report(&surfaces, &dir, ReportFormat::Svg)?);
    }
    Ok(written)
}

/// Runs every stage in order and returns the per-environment results.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<Vec<EnvOutput>> {
    cfg.validate()?;
    let pool = thread_pool(cfg)?;
    simulate_stage(cfg, &pool)?;
    let mut traces = train_stage(cfg)?;
    let mut thresholds = calibrate_stage(cfg, &pool)?;
    let mut detected = detect_stage(cfg, &pool)?;
    report_stage(cfg)?;
    Ok(cfg
        .environments
        .iter()
        .map(|kind| {
            let (surfaces, false_alarms) = detected.remove(kind).unwrap_or_default();
            EnvOutput {
                kind: *kind,
                surfaces,
                thresholds: thresholds.remove(kind).unwrap_or_default(),
                loss_traces: traces.remove(kind).unwrap_or_default(),
                false_alarms,
            }
        })
        .collect())
}
