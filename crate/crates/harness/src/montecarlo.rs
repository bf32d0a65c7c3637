//! Monte Carlo detection-probability estimates over the (SNR, Doppler) grid.

use rayon::prelude::*;
use radar_ood::calib::fused_statistic;
use radar_ood::sim::db_to_linear;
use radar_ood::{Error, Result};

use crate::calibrate::EnvCalibration;
use crate::config::{Channel, Detector, Preprocessing};
use crate::trial::{SnapshotScores, Split, Trial, TrialEngine};

/// Two-sided 95% normal quantile of the reported intervals.
pub const Z95: f64 = 1.959_963_984_540_054;

const BLOCK: usize = 64;

/// Wilson score interval `(lo, hi)` for `k` successes in `n` trials.
pub fn wilson(k: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    let lo = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if k as f64 == n { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

/// One grid point of a surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdPoint {
    pub snr_db: f64,
    pub doppler_bin: usize,
    pub detections: u64,
    pub trials: u64,
}

impl PdPoint {
    pub fn pd(&self) -> f64 {
        self.detections as f64 / self.trials as f64
    }

    /// 95% Wilson interval.
    pub fn interval(&self) -> (f64, f64) {
        wilson(self.detections, self.trials, Z95)
    }

    /// Half-width of the 95% Wilson interval.
    pub fn ci(&self) -> f64 {
        let (lo, hi) = self.interval();
        0.5 * (hi - lo)
    }
}

/// Detection probability of one channel over the grid, SNR-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PdSurface {
    pub channel: Channel,
    pub points: Vec<PdPoint>,
}

impl PdSurface {
    pub fn point(&self, snr_db: f64, doppler_bin: usize) -> Option<&PdPoint> {
        self.points
            .iter()
            .find(|p| p.snr_db == snr_db && p.doppler_bin == doppler_bin)
    }

    /// Points of one Doppler bin in SNR order.
    pub fn curve(&self, doppler_bin: usize) -> Vec<PdPoint> {
        self.points
            .iter()
            .filter(|p| p.doppler_bin == doppler_bin)
            .copied()
            .collect()
    }

    pub fn snr_grid(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for p in &self.points {
            if !out.contains(&p.snr_db) {
                out.push(p.snr_db);
            }
        }
        out
    }

    pub fn bins(&self) -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for p in &self.points {
            if !out.contains(&p.doppler_bin) {
                out.push(p.doppler_bin);
            }
        }
        out
    }
}

/// False-alarm count of one channel and bin on held-out H₀ data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FalseAlarms {
    pub channel: Channel,
    pub doppler_bin: usize,
    pub alarms: u64,
    pub trials: u64,
}

impl FalseAlarms {
    pub fn rate(&self) -> f64 {
        self.alarms as f64 / self.trials as f64
    }
}

/// Decision rules of one environment applied to trial scores.
pub struct Evaluator<'e, 'm> {
    pub engine: &'e TrialEngine<'m>,
    pub calibration: &'e EnvCalibration,
}

impl<'e, 'm> Evaluator<'e, 'm> {
    pub fn new(engine: &'e TrialEngine<'m>, calibration: &'e EnvCalibration) -> Self {
        Self { engine, calibration }
    }

    /// Fails early when a channel cannot be decided.
    pub fn check(&self, channels: &[Channel]) -> Result<()> {
        for &ch in channels {
            self.calibration.get(ch)?;
            if ch.detector == Detector::Fused {
                self.calibration.get(Channel::classical(Detector::AnmfTyler))?;
                self.calibration.get(Channel::new(Detector::Cvae, ch.preprocessing))?;
            }
        }
        Ok(())
    }

    fn cvae_score(scores: &SnapshotScores, mode: Preprocessing) -> Result<f64> {
        scores
            .cvae
            .get(&mode)
            .copied()
            .ok_or_else(|| Error::Dependency(format!("no {mode} CVAE score")))
    }

    fn classical_score(scores: &SnapshotScores, det: Detector, b: usize) -> Result<f64> {
        scores
            .classical(det)
            .get(b)
            .copied()
            .ok_or_else(|| Error::Dependency(format!("{det} was not computed")))
    }

    /// Test statistic of `ch` at bin `b`, on the scale its threshold uses.
    pub fn statistic(&self, ch: Channel, scores: &SnapshotScores, b: usize) -> Result<f64> {
        match ch.detector {
            Detector::Cvae => Self::cvae_score(scores, ch.preprocessing),
            Detector::Fused => {
                let cal = self.calibration.get(ch)?;
                let weights = cal
                    .weights
                    .as_ref()
                    .ok_or_else(|| Error::Dependency(format!("{ch} has no fusion weights")))?;
                let anmf = self.calibration.get(Channel::classical(Detector::AnmfTyler))?;
                let cvae = self.calibration.get(Channel::new(Detector::Cvae, ch.preprocessing))?;
                fused_statistic(
                    &anmf.bank,
                    &cvae.bank,
                    weights,
                    b,
                    Self::classical_score(scores, Detector::AnmfTyler, b)?,
                    Self::cvae_score(scores, ch.preprocessing)?,
                )
            }
            det => Self::classical_score(scores, det, b),
        }
    }

    pub fn decide(&self, ch: Channel, scores: &SnapshotScores, b: usize) -> Result<bool> {
        let s = self.statistic(ch, scores, b)?;
        Ok(self.calibration.get(ch)?.thresholds.decide(b, s))
    }

    /// Detection counts of every channel on `trials` test trials, indexed
    /// `[channel][snr][bin]`. Integer sums make the result independent of
    /// the worker count.
    fn detection_counts(
        &self,
        channels: &[Channel],
        snr_db: &[f64],
        bins: &[usize],
        trials: usize,
    ) -> Result<Vec<u64>> {
        self.check(channels)?;
        let m = self.engine.m();
        if let Some(&d) = bins.iter().find(|&&d| d >= m) {
            return Err(Error::InvalidArgument(format!("Doppler bin {d} outside 0..{m}")));
        }
        let snr: Vec<f64> = snr_db.iter().map(|&s| db_to_linear(s)).collect();
        let len = channels.len() * snr.len() * bins.len();
        let count_trial = |trial: &Trial, acc: &mut [u64]| -> Result<()> {
            for (si, &s) in snr.iter().enumerate() {
                for (bi, &d) in bins.iter().enumerate() {
                    let z = self.engine.with_target(trial, s, d);
                    let scores = self.engine.score(trial, &z)?;
                    for (ci, &ch) in channels.iter().enumerate() {
                        if self.decide(ch, &scores, d)? {
                            acc[(ci * snr.len() + si) * bins.len() + bi] += 1;
                        }
                    }
                }
            }
            Ok(())
        };
        (0..trials.div_ceil(BLOCK))
            .into_par_iter()
            .map(|blk| {
                let mut acc = vec![0u64; len];
                for i in blk * BLOCK..((blk + 1) * BLOCK).min(trials) {
                    let trial = self.engine.draw(Split::Test, i as u64)?;
                    count_trial(&trial, &mut acc)?;
                }
                Ok(acc)
            })
            .try_reduce(
                || vec![0u64; len],
                |mut a, b| {
                    a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                    Ok(a)
                },
            )
    }

    /// Pd surfaces of `channels` over the grid, on the current rayon pool.
    pub fn sweep(&self, channels: &[Channel], snr_db: &[f64], bins: &[usize], trials: usize) -> Result<Vec<PdSurface>> {
        let counts = self.detection_counts(channels, snr_db, bins, trials)?;
        Ok(channels
            .iter()
            .enumerate()
            .map(|(ci, &channel)| {
                let mut points = Vec::with_capacity(snr_db.len() * bins.len());
                for (si, &s) in snr_db.iter().enumerate() {
                    for (bi, &d) in bins.iter().enumerate() {
                        points.push(PdPoint {
                            snr_db: s,
                            doppler_bin: d,
                            detections: counts[(ci * snr_db.len() + si) * bins.len() + bi],
                            trials: trials as u64,
                        });
                    }
                }
                PdSurface { channel, points }
            })
            .collect())
    }

    /// `(P̂d, 95% Wilson half-width)` of one channel at one grid point.
    pub fn evaluate_detector(&self, ch: Channel, snr_db: f64, d: usize, trials: usize) -> Result<(f64, f64)> {
        let s = self.sweep(&[ch], &[snr_db], &[d], trials)?;
        let p = s[0].points[0];
        Ok((p.pd(), p.ci()))
    }

    /// False alarms of every channel and bin over `trials` held-out H₀ trials.
    pub fn false_alarms(&self, channels: &[Channel], trials: usize) -> Result<Vec<FalseAlarms>> {
        self.check(channels)?;
        let m = self.engine.m();
        let len = channels.len() * m;
        let counts = (0..trials.div_ceil(BLOCK))
            .into_par_iter()
            .map(|blk| {
                let mut acc = vec![0u64; len];
                for i in blk * BLOCK..((blk + 1) * BLOCK).min(trials) {
                    let trial = self.engine.draw(Split::NullTest, i as u64)?;
                    let scores = self.engine.score(&trial, &trial.cut)?;
                    for (ci, &ch) in channels.iter().enumerate() {
                        for b in 0..m {
                            if self.decide(ch, &scores, b)? {
                                acc[ci * m + b] += 1;
                            }
                        }
                    }
                }
                Ok::<_, Error>(acc)
            })
            .try_reduce(
                || vec![0u64; len],
                |mut a, b| {
                    a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                    Ok(a)
                },
            )?;
        Ok(channels
            .iter()
            .enumerate()
            .flat_map(|(ci, &channel)| {
                let counts = &counts;
                (0..m).map(move |b| FalseAlarms {
                    channel,
                    doppler_bin: b,
                    alarms: counts[ci * m + b],
                    trials: trials as u64,
                })
            })
            .collect())
    }
}
