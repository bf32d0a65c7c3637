//! Per-Doppler-bin null calibration, p-value fusion and empirical CFAR thresholds.
//!
//! Every detector score is mapped to an add-one PIT p-value
//! `p = (1 + #{null ≥ s}) / (N_b + 1)` against its own bin's null sample, so
//! p-values are never zero and depend on scores only through their rank.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bins with fewer calibration points than this are rejected outright.
pub const MIN_CALIBRATION: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcdfBank {
    detector: String,
    /// Ascending null scores per Doppler bin.
    bins: Vec<Vec<f64>>,
}

impl EcdfBank {
    pub fn detector(&self) -> &str {
        &self.detector
    }

    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    pub fn count(&self, b: usize) -> usize {
        self.bins[b].len()
    }

    pub fn sorted(&self, b: usize) -> &[f64] {
        &self.bins[b]
    }

    /// `#{null ≤ s} / N_b`.
    pub fn cdf(&self, b: usize, s: f64) -> f64 {
        let v = &self.bins[b];
        v.partition_point(|&x| x <= s) as f64 / v.len() as f64
    }

    /// `#{null ≥ s}`.
    pub fn count_at_least(&self, b: usize, s: f64) -> usize {
        let v = &self.bins[b];
        v.len() - v.partition_point(|&x| x < s)
    }
}

/// Sorts and retains the null scores of each bin.
pub fn fit_ecdf(detector: impl Into<String>, null_scores: Vec<Vec<f64>>) -> Result<EcdfBank> {
    if null_scores.is_empty() {
        return Err(Error::InsufficientData("no Doppler bins to calibrate".into()));
    }
    let mut bins = null_scores;
    for (b, v) in bins.iter_mut().enumerate() {
        if v.is_empty() {
            return Err(Error::InsufficientData(format!("bin {b} has no null scores")));
        }
        if v.iter().any(|x| x.is_nan()) {
            return Err(Error::invalid(format!("bin {b} has NaN null scores")));
        }
        v.sort_by(f64::total_cmp);
    }
    Ok(EcdfBank {
        detector: detector.into(),
        bins,
    })
}

/// `(1 + #{null ≥ s}) / (N_b + 1)`.
pub fn pit_pvalue(bank: &EcdfBank, b: usize, s: f64) -> f64 {
    (1 + bank.count_at_least(b, s)) as f64 / (bank.count(b) + 1) as f64
}

/// Leave-self-out p-value of the `i`-th sorted null score of bin `b`.
pub fn pit_pvalue_in_sample(bank: &EcdfBank, b: usize, i: usize) -> f64 {
    let s = bank.sorted(b)[i];
    let others_ge = bank.count_at_least(b, s) - 1;
    (1 + others_ge) as f64 / bank.count(b) as f64
}

/// Leave-self-out p-value `#{null ≥ s} / N_b` of a score that is itself in the bank.
pub fn pit_pvalue_member(bank: &EcdfBank, b: usize, s: f64) -> Result<f64> {
    if bank.sorted(b).binary_search_by(|x| x.total_cmp(&s)).is_err() {
        return Err(Error::invalid(format!("score {s} is not a bin {b} calibration point")));
    }
    Ok(bank.count_at_least(b, s) as f64 / bank.count(b) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightKind {
    Sigmoid,
    GaussianPrior,
    Constant,
}

/// How the across-bin spread in the sigmoid schedule is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmoidSpread {
    /// Standard deviation of the bin means: the sigmoid argument is a z-score.
    #[default]
    StdDev,
    /// Raw variance of the bin means.
    Variance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSchedule {
    pub w: Vec<f64>,
    pub kind: WeightKind,
}

impl WeightSchedule {
    pub fn constant(w: f64, m: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&w) {
            return Err(Error::invalid(format!("weight {w} outside [0, 1]")));
        }
        Ok(Self {
            w: vec![w; m],
            kind: WeightKind::Constant,
        })
    }
}

/// `w_b = 1 / (1 + exp(−(p̄_b − μ_p)/σ_p))` over the per-bin mean null p-values.
///
/// A zero spread gives `w_b = 0.5` everywhere.
pub fn weights_sigmoid(null_pvalues: &[Vec<f64>], spread: SigmoidSpread) -> Result<WeightSchedule> {
    if null_pvalues.is_empty() {
        return Err(Error::InsufficientData("no bins".into()));
    }
    let mut means = Vec::with_capacity(null_pvalues.len());
    for (b, v) in null_pvalues.iter().enumerate() {
        if v.len() < 2 {
            return Err(Error::InsufficientData(format!("bin {b} has {} null p-values", v.len())));
        }
        means.push(v.iter().sum::<f64>() / v.len() as f64);
    }
    let m = means.len() as f64;
    let mu = means.iter().sum::<f64>() / m;
    let var = means.iter().map(|p| (p - mu).powi(2)).sum::<f64>() / m;
    let sigma = match spread {
        SigmoidSpread::StdDev => var.sqrt(),
        SigmoidSpread::Variance => var,
    };
    let w = if sigma > 0.0 {
        means.iter().map(|p| 1.0 / (1.0 + (-(p - mu) / sigma).exp())).collect()
    } else {
        vec![0.5; means.len()]
    };
    Ok(WeightSchedule {
        w,
        kind: WeightKind::Sigmoid,
    })
}

/// `min(|b − b0|, m − |b − b0|)`.
pub fn circular_distance(b: usize, b0: usize, m: usize) -> usize {
    let d = b.abs_diff(b0) % m;
    d.min(m - d)
}

/// `w_b = exp(−½ (d(b, b0)/σ₀)²)` with circular Doppler distance.
pub fn weights_gaussian_prior(b0: usize, sigma0: f64, m: usize) -> Result<WeightSchedule> {
    if !(sigma0 > 0.0 && sigma0.is_finite()) {
        return Err(Error::invalid(format!("sigma0 must be positive, got {sigma0}")));
    }
    if m == 0 || b0 >= m {
        return Err(Error::invalid(format!("reference bin {b0} outside 0..{m}")));
    }
    let w = (0..m)
        .map(|b| {
            let d = circular_distance(b, b0, m) as f64 / sigma0;
            (-0.5 * d * d).exp()
        })
        .collect();
    Ok(WeightSchedule {
        w,
        kind: WeightKind::GaussianPrior,
    })
}

/// `S* = −(w·ln p_anmf + (1 − w)·ln p_cvae)`.
pub fn fuse_logp(p_anmf: f64, p_cvae: f64, w: f64) -> Result<f64> {
    for p in [p_anmf, p_cvae] {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::invalid(format!("p-value {p} outside (0, 1]")));
        }
    }
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::invalid(format!("weight {w} outside [0, 1]")));
    }
    // Exact endpoints keep w ∈ {0, 1} bit-identical to the single-branch ranking.
    Ok(if w == 1.0 {
        -p_anmf.ln()
    } else if w == 0.0 {
        -p_cvae.ln()
    } else {
        -(w * p_anmf.ln() + (1.0 - w) * p_cvae.ln())
    })
}

/// Fused statistic of a fresh sample from its two branch scores.
pub fn fused_statistic(
    anmf_bank: &EcdfBank,
    cvae_bank: &EcdfBank,
    weights: &WeightSchedule,
    b: usize,
    s_anmf: f64,
    s_cvae: f64,
) -> Result<f64> {
    fuse_logp(
        pit_pvalue(anmf_bank, b, s_anmf),
        pit_pvalue(cvae_bank, b, s_cvae),
        weights.w[b],
    )
}

/// Null fused scores from paired calibration samples.
///
/// `anmf[b][i]` and `cvae[b][i]` must come from the same H₀ snapshot and be
/// the scores the two banks were fitted on; each branch p-value leaves its
/// own sample out.
pub fn paired_fused_null(
    anmf_bank: &EcdfBank,
    anmf: &[Vec<f64>],
    cvae_bank: &EcdfBank,
    cvae: &[Vec<f64>],
    weights: &WeightSchedule,
) -> Result<Vec<Vec<f64>>> {
    let m = anmf_bank.n_bins();
    if cvae_bank.n_bins() != m || anmf.len() != m || cvae.len() != m || weights.w.len() != m {
        return Err(Error::invalid("fusion inputs disagree on the bin count"));
    }
    let mut out = Vec::with_capacity(m);
    for b in 0..m {
        if anmf[b].len() != cvae[b].len() {
            return Err(Error::invalid(format!(
                "bin {b}: {} ANMF and {} CVAE scores are not paired",
                anmf[b].len(),
                cvae[b].len()
            )));
        }
        let mut fused = Vec::with_capacity(anmf[b].len());
        for (&sa, &sc) in anmf[b].iter().zip(&cvae[b]) {
            let pa = pit_pvalue_member(anmf_bank, b, sa)?;
            let pc = pit_pvalue_member(cvae_bank, b, sc)?;
            fused.push(fuse_logp(pa, pc, weights.w[b])?);
        }
        out.push(fused);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub lambda: Vec<f64>,
    pub pfa: f64,
    pub n_cal: Vec<usize>,
}

impl ThresholdTable {
    /// H₁ iff `s ≥ λ(b)`.
    pub fn decide(&self, b: usize, s: f64) -> bool {
        s >= self.lambda[b]
    }
}

/// Smallest null score whose upper-tail count `#{≥ λ}` is at most `pfa·N_b`.
///
/// If every candidate exceeds the budget (heavy ties at the maximum), the
/// threshold sits just above the largest null score.
pub fn cfar_threshold(null_scores: &[Vec<f64>], pfa: f64) -> Result<ThresholdTable> {
    if !(pfa > 0.0 && pfa < 1.0) {
        return Err(Error::invalid(format!("pfa must lie in (0, 1), got {pfa}")));
    }
    if null_scores.is_empty() {
        return Err(Error::InsufficientData("no bins".into()));
    }
    let mut lambda = Vec::with_capacity(null_scores.len());
    let mut n_cal = Vec::with_capacity(null_scores.len());
    for (b, v) in null_scores.iter().enumerate() {
        let n = v.len();
        if n < MIN_CALIBRATION {
            return Err(Error::InsufficientData(format!(
                "bin {b} has {n} null scores, at least {MIN_CALIBRATION} required"
            )));
        }
        if (n as f64) < 1.0 / pfa {
            log::warn!("bin {b}: {n} null scores are fewer than 1/pfa = {:.0}", 1.0 / pfa);
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid(format!("bin {b} has non-finite null scores")));
        }
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        let budget = (pfa * n as f64 + 1e-9).floor() as usize;
        // Walk down from the top while the tail count stays within budget.
        let mut lam = s[n - 1].next_up();
        let mut i = n;
        while i > 0 {
            let val = s[i - 1];
            let first = s.partition_point(|&x| x < val);
            if n - first > budget {
                break;
            }
            lam = val;
            i = first;
        }
        lambda.push(lam);
        n_cal.push(n);
    }
    Ok(ThresholdTable { lambda, pfa, n_cal })
}

/// `√(ln(2/α) / (2n))`.
pub fn dkw_bound(n: usize, alpha: f64) -> Result<f64> {
    if n == 0 {
        return Err(Error::invalid("sample count must be positive"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(((2.0 / alpha).ln() / (2.0 * n as f64)).sqrt())
}

/// `sup_t |Ĝ(t) − t|` for the empirical CDF `Ĝ` of `values` against U(0, 1).
pub fn sup_deviation_from_uniform(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mut worst: f64 = 0.0;
    let mut i = 0;
    while i < v.len() {
        let x = v[i].clamp(0.0, 1.0);
        let mut j = i;
        while j < v.len() && v[j] == v[i] {
            j += 1;
        }
        // Ĝ jumps from i/n to j/n at x.
        worst = worst.max((x - i as f64 / n).abs()).max((j as f64 / n - x).abs());
        i = j;
    }
    worst
}

/// Calibration artefact of one detector: ECDF bank, thresholds and optional fusion weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub bank: EcdfBank,
    pub thresholds: ThresholdTable,
    pub weights: Option<WeightSchedule>,
}

const SIDECAR_MAGIC: [u8; 4] = *b"CALB";
const SIDECAR_VERSION: u32 = 1;

impl Calibration {
    pub fn encode<W: Write>(&self, mut w: W) -> Result<()> {
        let m = self.bank.n_bins();
        if self.thresholds.lambda.len() != m || self.weights.as_ref().is_some_and(|s| s.w.len() != m) {
            return Err(Error::invalid("calibration tables disagree on the bin count"));
        }
        w.write_all(&SIDECAR_MAGIC)?;
        w.write_all(&SIDECAR_VERSION.to_le_bytes())?;
        let name = self.bank.detector.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(m as u32).to_le_bytes())?;
        w.write_all(&self.thresholds.pfa.to_le_bytes())?;
        let kind: u8 = match self.weights.as_ref().map(|s| s.kind) {
            None => 0,
            Some(WeightKind::Sigmoid) => 1,
            Some(WeightKind::GaussianPrior) => 2,
            Some(WeightKind::Constant) => 3,
        };
        w.write_all(&[kind])?;
        for b in 0..m {
            w.write_all(&(self.thresholds.n_cal[b] as u64).to_le_bytes())?;
            w.write_all(&self.thresholds.lambda[b].to_le_bytes())?;
            let wb = self.weights.as_ref().map_or(f64::NAN, |s| s.w[b]);
            w.write_all(&wb.to_le_bytes())?;
            w.write_all(&(self.bank.count(b) as u64).to_le_bytes())?;
            for x in self.bank.sorted(b) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn decode<R: Read>(mut r: R) -> Result<Self> {
        let mut off = 0u64;
        let mut take = |n: usize, r: &mut R| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf)
                .map_err(|_| Error::format(off, "truncated calibration sidecar"))?;
            off += n as u64;
            Ok(buf)
        };
        if take(4, &mut r)? != SIDECAR_MAGIC {
            return Err(Error::format(0, "bad calibration magic"));
        }
        let u32_of = |b: Vec<u8>| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let u64_of = |b: Vec<u8>| u64::from_le_bytes(b.try_into().expect("8 bytes"));
        let f64_of = |b: Vec<u8>| f64::from_le_bytes(b.try_into().expect("8 bytes"));
        let version = u32_of(take(4, &mut r)?);
        if version != SIDECAR_VERSION {
            return Err(Error::format(4, format!("unsupported sidecar version {version}")));
        }
        let name_len = u32_of(take(4, &mut r)?) as usize;
        if name_len > 4096 {
            return Err(Error::format(8, "detector label too long"));
        }
        let detector = String::from_utf8(take(name_len, &mut r)?)
            .map_err(|_| Error::format(12, "detector label is not UTF-8"))?;
        let m = u32_of(take(4, &mut r)?) as usize;
        if m == 0 || m > 1 << 16 {
            return Err(Error::format(12 + name_len as u64, format!("{m} bins out of bounds")));
        }
        let pfa = f64_of(take(8, &mut r)?);
        let kind = match take(1, &mut r)?[0] {
            0 => None,
            1 => Some(WeightKind::Sigmoid),
            2 => Some(WeightKind::GaussianPrior),
            3 => Some(WeightKind::Constant),
            k => return Err(Error::format(24 + name_len as u64, format!("unknown weight kind {k}"))),
        };
        let (mut lambda, mut n_cal, mut w, mut bins) = (vec![], vec![], vec![], vec![]);
        for _ in 0..m {
            n_cal.push(u64_of(take(8, &mut r)?) as usize);
            lambda.push(f64_of(take(8, &mut r)?));
            w.push(f64_of(take(8, &mut r)?));
            let n = u64_of(take(8, &mut r)?);
            if n > 1 << 32 {
                return Err(Error::format(0, format!("bin with {n} scores out of bounds")));
            }
            let raw = take(n as usize * 8, &mut r)?;
            bins.push(raw.chunks_exact(8).map(|c| f64_of(c.to_vec())).collect());
        }
        Ok(Self {
            bank: EcdfBank { detector, bins },
            thresholds: ThresholdTable { lambda, pfa, n_cal },
            weights: kind.map(|kind| WeightSchedule { w, kind }),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.encode(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(BufReader::new(File::open(path)?))
    }

    /// CSV with columns `bin,n_b,lambda,w`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("bin,n_b,lambda,w\n");
        for b in 0..self.bank.n_bins() {
            let w = self
                .weights
                .as_ref()
                .map_or(String::new(), |s| format!("{}", s.w[b]));
            out.push_str(&format!("{b},{},{},{w}\n", self.bank.count(b), self.thresholds.lambda[b]));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn ecdf_examples() {
        let bank = fit_ecdf("x", vec![vec![3.0, 1.0, 2.0], vec![1.0, 1.0, 2.0, 2.0]]).unwrap();
        assert!((bank.cdf(0, 2.0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(bank.cdf(1, 1.0), 0.5);
        assert_eq!(bank.count_at_least(1, 2.0), 2);
        assert!(matches!(fit_ecdf("x", vec![vec![]]), Err(Error::InsufficientData(_))));
        assert!(fit_ecdf("x", vec![vec![f64::NAN]]).is_err());
    }

    #[test]
    fn pit_examples() {
        let scores: Vec<f64> = (0..101).map(|i| i as f64).collect();
        let bank = fit_ecdf("x", vec![scores]).unwrap();
        assert_eq!(pit_pvalue(&bank, 0, 1e9), 1.0 / 102.0);
        assert_eq!(pit_pvalue(&bank, 0, -1.0), 1.0);
        assert!((pit_pvalue(&bank, 0, 50.0) - 0.5).abs() <= 1.0 / 102.0);
        assert_eq!(pit_pvalue_in_sample(&bank, 0, 100), 1.0 / 101.0);
        assert_eq!(pit_pvalue_in_sample(&bank, 0, 0), 1.0);
    }

    #[test]
    fn pit_is_super_uniform() {
        let mut rng = substream(1, &[]);
        let n_b = 50;
        let trials = 200_000;
        let mut hist = vec![0usize; n_b + 2];
        for _ in 0..trials / 1000 {
            let null: Vec<f64> = (0..n_b).map(|_| rng.random::<f64>()).collect();
            let bank = fit_ecdf("u", vec![null]).unwrap();
            for _ in 0..1000 {
                let p = pit_pvalue(&bank, 0, rng.random::<f64>());
                hist[(p * (n_b + 1) as f64).round() as usize] += 1;
            }
        }
        let mut cum = 0usize;
        for (k, h) in hist.iter().enumerate().skip(1) {
            cum += h;
            let t = k as f64 / (n_b + 1) as f64;
            let frac = cum as f64 / trials as f64;
            let sd = (t * (1.0 - t) / trials as f64).sqrt();
            assert!(frac <= t + 1.0 / (n_b + 1) as f64 + 4.0 * sd, "t={t} frac={frac}");
        }
    }

    #[test]
    fn sigmoid_weights() {
        let bins = vec![vec![0.4, 0.6], vec![0.2, 0.2], vec![0.8, 0.8]];
        let s = weights_sigmoid(&bins, SigmoidSpread::StdDev).unwrap();
        assert!((s.w[0] - 0.5).abs() < 1e-15);
        // Bin means 0.5, 0.2, 0.8: μ_p = 0.5, σ_p = √0.06.
        let sd = 0.06f64.sqrt();
        assert!((s.w[2] - 1.0 / (1.0 + (-0.3 / sd).exp())).abs() < 1e-12);
        let flat = weights_sigmoid(&vec![vec![0.3, 0.5]; 4], SigmoidSpread::StdDev).unwrap();
        assert!(flat.w.iter().all(|&w| w == 0.5));
        let v = weights_sigmoid(&bins, SigmoidSpread::Variance).unwrap();
        assert!((v.w[2] - 1.0 / (1.0 + (-0.3 / 0.06f64).exp())).abs() < 1e-12);
        assert!(weights_sigmoid(&[vec![0.5]], SigmoidSpread::StdDev).is_err());
    }

    #[test]
    fn sigmoid_one_spread_above_mean() {
        // Means μ−σ, μ, μ+σ in a symmetric pair layout.
        let bins = vec![vec![0.3; 2], vec![0.7; 2]];
        let s = weights_sigmoid(&bins, SigmoidSpread::StdDev).unwrap();
        assert!((s.w[1] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-12);
        assert!((s.w[1] - 0.731_058_578_6).abs() < 1e-9);
    }

    #[test]
    fn gaussian_prior_weights() {
        let s = weights_gaussian_prior(0, 1.5, 16).unwrap();
        assert_eq!(s.w[0], 1.0);
        assert_eq!(s.w[15], s.w[1]);
        let s = weights_gaussian_prior(3, 2.0, 16).unwrap();
        assert!((s.w[5] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((s.w[5] - 0.6065).abs() < 1e-4);
        assert!(weights_gaussian_prior(0, 0.0, 16).is_err());
        assert_eq!(circular_distance(1, 15, 16), 2);
    }

    #[test]
    fn fusion_examples() {
        assert_eq!(fuse_logp(0.2, 0.7, 1.0).unwrap(), -(0.2f64).ln());
        assert_eq!(fuse_logp(0.2, 0.7, 0.0).unwrap(), -(0.7f64).ln());
        assert!((fuse_logp(0.01, 0.01, 0.5).unwrap() - 4.605_170_186).abs() < 1e-9);
        assert!(fuse_logp(0.0, 0.5, 0.5).is_err());
        assert!(fuse_logp(0.5, 0.5, 1.5).is_err());
    }

    proptest! {
        #[test]
        fn fusion_strictly_decreasing(p in 0.001f64..0.99, q in 0.001f64..0.99, w in 0.01f64..0.99, dp in 0.0001f64..0.009) {
            let base = fuse_logp(p, q, w).unwrap();
            prop_assert!(fuse_logp(p + dp, q, w).unwrap() < base);
            prop_assert!(fuse_logp(p, q + dp, w).unwrap() < base);
        }

        #[test]
        fn threshold_respects_budget_on_calibration_set(
            v in proptest::collection::vec(0u32..50, 10..400),
            pfa in 0.005f64..0.3,
        ) {
            let scores: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            let t = cfar_threshold(&[scores.clone()], pfa).unwrap();
            let exceed = scores.iter().filter(|&&s| t.decide(0, s)).count();
            prop_assert!(exceed as f64 <= pfa * scores.len() as f64 + 1e-9);
            // λ is the smallest such level among the null values.
            let smaller: Vec<f64> = scores.iter().copied().filter(|&s| s < t.lambda[0]).collect();
            if let Some(next) = smaller.into_iter().reduce(f64::max) {
                let e = scores.iter().filter(|&&s| s >= next).count();
                prop_assert!(e as f64 > pfa * scores.len() as f64);
            }
        }
    }

    fn fused_decisions(
        anmf: &[Vec<f64>],
        cvae: &[Vec<f64>],
        fresh_a: &[f64],
        fresh_c: &[f64],
        w: f64,
    ) -> Vec<bool> {
        let ab = fit_ecdf("a", anmf.to_vec()).unwrap();
        let cb = fit_ecdf("c", cvae.to_vec()).unwrap();
        let ws = WeightSchedule::constant(w, 1).unwrap();
        let null = paired_fused_null(&ab, anmf, &cb, cvae, &ws).unwrap();
        let t = cfar_threshold(&null, 0.01).unwrap();
        fresh_a
            .iter()
            .zip(fresh_c)
            .map(|(&a, &c)| t.decide(0, fused_statistic(&ab, &cb, &ws, 0, a, c).unwrap()))
            .collect()
    }

    #[test]
    fn endpoint_weights_reproduce_single_branches() {
        let mut rng = substream(9, &[]);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random::<f64>().ln().abs()).collect() };
        let (anmf, cvae) = (vec![draw(5000)], vec![draw(5000)]);
        let (fa, fc) = (draw(20_000), draw(20_000));
        let ta = cfar_threshold(&anmf, 0.01).unwrap();
        let tc = cfar_threshold(&cvae, 0.01).unwrap();
        let only_a: Vec<bool> = fa.iter().map(|&s| ta.decide(0, s)).collect();
        let only_c: Vec<bool> = fc.iter().map(|&s| tc.decide(0, s)).collect();
        assert_eq!(fused_decisions(&anmf, &cvae, &fa, &fc, 1.0), only_a);
        assert_eq!(fused_decisions(&anmf, &cvae, &fa, &fc, 0.0), only_c);

        let base = fused_decisions(&anmf, &cvae, &fa, &fc, 0.4);
        let warp = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| (3.0 * x).exp() - 7.0).collect() };
        let warped = fused_decisions(&[warp(&anmf[0])], &cvae, &warp(&fa), &fc, 0.4);
        assert_eq!(warped, base);
        assert!(base.iter().any(|&d| d));
    }

    #[test]
    fn member_pvalue_requires_membership() {
        let bank = fit_ecdf("x", vec![vec![1.0, 2.0, 2.0, 3.0]]).unwrap();
        assert_eq!(pit_pvalue_member(&bank, 0, 3.0).unwrap(), 0.25);
        assert_eq!(pit_pvalue_member(&bank, 0, 2.0).unwrap(), 0.75);
        assert!(pit_pvalue_member(&bank, 0, 2.5).is_err());
    }

    #[test]
    fn threshold_examples() {
        let scores: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        let t = cfar_threshold(&[scores], 0.01).unwrap();
        assert_eq!(t.lambda[0], 100.0);
        let ties = vec![1.0; 50];
        let t = cfar_threshold(&[ties], 0.01).unwrap();
        assert!(t.lambda[0] > 1.0 && t.lambda[0].is_finite());
        assert!(matches!(
            cfar_threshold(&[vec![1.0; 9]], 0.01),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn threshold_holds_out_of_sample() {
        let mut rng = substream(2, &[]);
        let cal: Vec<f64> = (0..100_000).map(|_| -rng.random::<f64>().ln()).collect();
        let t = cfar_threshold(&[cal], 0.01).unwrap();
        let n = 100_000;
        let hits = (0..n).filter(|_| t.decide(0, -rng.random::<f64>().ln())).count();
        let pfa = hits as f64 / n as f64;
        let sd = (0.01 * 0.99 / n as f64).sqrt();
        assert!((pfa - 0.01).abs() < 3.0 * sd * 2f64.sqrt(), "{pfa}");
    }

    #[test]
    fn dkw_examples() {
        assert!((dkw_bound(10_000, 0.05).unwrap() - 0.013_581).abs() < 1e-6);
        let a = dkw_bound(100, 0.05).unwrap();
        assert!((dkw_bound(400, 0.05).unwrap() - a / 2.0).abs() < 1e-15);
        assert!(dkw_bound(1 << 40, 0.05).unwrap() < 1e-5);
        assert!(dkw_bound(0, 0.05).is_err());
    }

    #[test]
    fn ecdf_of_uniforms_within_dkw() {
        let n = 10_000;
        let bound = dkw_bound(n, 0.05).unwrap();
        let mut covered = 0;
        for seed in 0..100 {
            let mut rng = substream(3, &[seed]);
            let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            if sup_deviation_from_uniform(&u) < bound {
                covered += 1;
            }
        }
        assert!(covered >= 90, "{covered}");
    }

    #[test]
    fn sup_deviation_examples() {
        assert!((sup_deviation_from_uniform(&[0.5]) - 0.5).abs() < 1e-15);
        let grid: Vec<f64> = (0..10).map(|i| (i as f64 + 0.5) / 10.0).collect();
        assert!((sup_deviation_from_uniform(&grid) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn sidecar_round_trip() {
        let null = vec![vec![0.5, 1.5, 2.5, 3.5, 4.5, 5.5, 6.5, 7.5, 8.5, 9.5]; 3];
        let bank = fit_ecdf("ANMF-Tyler", null.clone()).unwrap();
        let cal = Calibration {
            bank,
            thresholds: cfar_threshold(&null, 0.1).unwrap(),
            weights: Some(weights_gaussian_prior(0, 1.5, 3).unwrap()),
        };
        let mut buf = Vec::new();
        cal.encode(&mut buf).unwrap();
        assert_eq!(Calibration::decode(buf.as_slice()).unwrap(), cal);
        assert!(matches!(
            Calibration::decode(&buf[..buf.len() - 1]),
            Err(Error::Format { .. })
        ));
        let csv = cal.summary_csv();
        assert!(csv.starts_with("bin,n_b,lambda,w\n0,10,9.5,1\n"));
    }
}
