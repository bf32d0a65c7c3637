//! Null-score collection and per-channel calibration.

use std::collections::BTreeMap;

use rayon::prelude::*;
use radar_ood::calib::{
    cfar_threshold, fit_ecdf, paired_fused_null, pit_pvalue_member, weights_gaussian_prior, weights_sigmoid,
    Calibration, WeightSchedule,
};
use radar_ood::sim::DisturbanceKind;
use radar_ood::{Error, Result};

use crate::config::{Channel, Detector, ExperimentConfig, Preprocessing, ScheduleChoice};
use crate::trial::{Split, TrialEngine};

/// Trials scored per parallel task.
const BLOCK: usize = 256;
/// Blocks materialized at once before being folded into the columns.
const WAVE: usize = 64;

const CLASSICAL: [Detector; 5] = [
    Detector::Mf,
    Detector::Nmf,
    Detector::AmfScm,
    Detector::AnmfScm,
    Detector::AnmfTyler,
];

/// Null statistics in column form: `classical[det][bin][trial]` and
/// `cvae[mode][trial]`. Trial `i` of every column is the same H₀ snapshot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NullScores {
    pub classical: BTreeMap<Detector, Vec<Vec<f64>>>,
    pub cvae: BTreeMap<Preprocessing, Vec<f64>>,
}

impl NullScores {
    pub fn trials(&self) -> usize {
        self.cvae
            .values()
            .map(Vec::len)
            .chain(self.classical.values().map(|c| c[0].len()))
            .next()
            .unwrap_or(0)
    }
}

/// Scores `n` H₀ trials of `split` on the current rayon pool.
///
/// The result depends only on the engine and `split`, not on the pool size.
pub fn collect_null(engine: &TrialEngine, split: Split, n: usize) -> Result<NullScores> {
    let m = engine.m();
    let mut out = NullScores::default();
    let n_blocks = n.div_ceil(BLOCK);
    for wave in (0..n_blocks).step_by(WAVE) {
        let blocks: Vec<_> = (wave..(wave + WAVE).min(n_blocks))
            .into_par_iter()
            .map(|blk| {
                (blk * BLOCK..((blk + 1) * BLOCK).min(n))
                    .map(|i| {
                        let trial = engine.draw(split, i as u64)?;
                        engine.score(&trial, &trial.cut)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        for scores in blocks.iter().flatten() {
            for det in CLASSICAL {
                let v = scores.classical(det);
                if v.is_empty() {
                    continue;
                }
                let cols = out
                    .classical
                    .entry(det)
                    .or_insert_with(|| (0..m).map(|_| Vec::with_capacity(n)).collect());
                for (col, &x) in cols.iter_mut().zip(v) {
                    col.push(x);
                }
            }
            for (&mode, &s) in &scores.cvae {
                out.cvae.entry(mode).or_insert_with(|| Vec::with_capacity(n)).push(s);
            }
        }
    }
    Ok(out)
}

/// Calibrations of every channel an experiment reports or depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvCalibration {
    pub kind: DisturbanceKind,
    pub channels: BTreeMap<Channel, Calibration>,
}

impl EnvCalibration {
    pub fn get(&self, ch: Channel) -> Result<&Calibration> {
        self.channels
            .get(&ch)
            .ok_or_else(|| Error::Dependency(format!("no calibration for {ch} in {}", self.kind)))
    }
}

/// Fusion weights of one preprocessing mode.
pub fn fusion_weights(cfg: &ExperimentConfig, cvae_bank_scores: &[Vec<f64>], cvae: &Calibration) -> Result<WeightSchedule> {
    let w = &cfg.weights;
    match w.schedule {
        ScheduleChoice::GaussianPrior => weights_gaussian_prior(w.b0, w.sigma0, cfg.m),
        ScheduleChoice::Constant => WeightSchedule::constant(w.value, cfg.m),
        ScheduleChoice::Sigmoid => {
            let pvalues = cvae_bank_scores
                .iter()
                .enumerate()
                .map(|(b, col)| col.iter().map(|&s| pit_pvalue_member(&cvae.bank, b, s)).collect())
                .collect::<Result<Vec<Vec<f64>>>>()?;
            weights_sigmoid(&pvalues, w.spread)
        }
    }
}

fn calibrate_columns(label: &str, columns: Vec<Vec<f64>>, pfa: f64) -> Result<Calibration> {
    let thresholds = cfar_threshold(&columns, pfa)?;
    Ok(Calibration {
        bank: fit_ecdf(label, columns)?,
        thresholds,
        weights: None,
    })
}

/// Fits banks, weights and CFAR thresholds for the roster of `cfg`.
///
/// Fusion also calibrates its ANMF-Tyler and CVAE branches, whether or not
/// they are reported on their own.
pub fn calibrate(cfg: &ExperimentConfig, kind: DisturbanceKind, mut null: NullScores) -> Result<EnvCalibration> {
    let m = cfg.m;
    let pfa = cfg.pfa;
    let roster = cfg.channels();
    let fused: Vec<Preprocessing> = roster
        .iter()
        .filter(|c| c.detector == Detector::Fused)
        .map(|c| c.preprocessing)
        .collect();
    let missing = |what: &str| Error::Dependency(format!("null scores lack {what}"));
    let mut channels = BTreeMap::new();

    if !fused.is_empty() {
        let anmf_ch = Channel::classical(Detector::AnmfTyler);
        let anmf_cols = null
            .classical
            .get(&Detector::AnmfTyler)
            .ok_or_else(|| missing("ANMF-Tyler"))?
            .clone();
        let anmf = calibrate_columns(Detector::AnmfTyler.label(), anmf_cols, pfa)?;
        let anmf_cols = &null.classical[&Detector::AnmfTyler];
        for &mode in &fused {
            let cvae_cols = vec![null.cvae.get(&mode).ok_or_else(|| missing("CVAE scores"))?.clone(); m];
            let cvae = calibrate_columns(Detector::Cvae.label(), cvae_cols.clone(), pfa)?;
            let weights = fusion_weights(cfg, &cvae_cols, &cvae)?;
            let fused_null = paired_fused_null(&anmf.bank, anmf_cols, &cvae.bank, &cvae_cols, &weights)?;
            let mut fused = calibrate_columns(Detector::Fused.label(), fused_null, pfa)?;
            fused.weights = Some(weights);
            channels.insert(Channel::new(Detector::Fused, mode), fused);
            channels.insert(Channel::new(Detector::Cvae, mode), cvae);
        }
        channels.insert(anmf_ch, anmf);
        null.classical.remove(&Detector::AnmfTyler);
    }

    for ch in &roster {
        if channels.contains_key(ch) {
            continue;
        }
        let cal = match ch.detector {
            Detector::Cvae => {
                let v = null.cvae.remove(&ch.preprocessing).ok_or_else(|| missing("CVAE scores"))?;
                calibrate_columns(ch.detector.label(), vec![v; m], pfa)?
            }
            Detector::Fused => unreachable!("fusion calibrated above"),
            det => {
                let cols = null.classical.remove(&det).ok_or_else(|| missing(det.label()))?;
                calibrate_columns(det.label(), cols, pfa)?
            }
        };
        channels.insert(*ch, cal);
    }
    Ok(EnvCalibration { kind, channels })
}
