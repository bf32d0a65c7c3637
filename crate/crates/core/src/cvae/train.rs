//! Minibatch β-ELBO training with Adam.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{Cvae, LossParts};
use super::posterior::LatentNoise;
use crate::error::{Error, Result};
use crate::linalg::C64;
use crate::rng::substream;

const DOMAIN_SHUFFLE: u64 = 0x5A0F;
const DOMAIN_NOISE: u64 = 0x7015;
/// Epoch-mean loss above which training is declared divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Profiles used to refit the normalization buffers at each epoch start.
    pub norm_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 128,
            learning_rate: 1e-3,
            beta: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            norm_samples: 2048,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning rate must be nonnegative"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid("beta must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::invalid("Adam moment decays must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::invalid("Adam epsilon must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let b1t = 1.0 - cfg.adam_beta1.powi(self.t as i32);
        let b2t = 1.0 - cfg.adam_beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.adam_beta1 * self.m[i] + (1.0 - cfg.adam_beta1) * g;
            self.v[i] = cfg.adam_beta2 * self.v[i] + (1.0 - cfg.adam_beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
}

/// Trains `model` in place on H₀ profiles and returns the per-epoch mean losses.
pub fn train<Z: AsRef<[C64]> + Sync>(model: &mut Cvae, data: &[Z], cfg: &TrainConfig) -> Result<Vec<EpochLoss>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("empty training set".into()));
    }
    let q = model.architecture().latent_dim;
    let mut adam = Adam::new(model.num_params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut grad = vec![0.0; model.num_params()];
    for epoch in 0..cfg.epochs {
        let mut rng = substream(cfg.seed, &[DOMAIN_SHUFFLE, epoch as u64]);
        order.shuffle(&mut rng);
        let refit: Vec<&[C64]> = order
            .iter()
            .take(cfg.norm_samples.max(1))
            .map(|&i| data[i].as_ref())
            .collect();
        model.refresh_norms(&refit)?;
        let mut noise_rng = substream(cfg.seed, &[DOMAIN_NOISE, epoch as u64]);
        let mut sum = LossParts::default();
        for batch in order.chunks(cfg.batch_size) {
            grad.fill(0.0);
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let noise = LatentNoise::draw(q, &mut noise_rng);
                let parts = model.loss_and_grad(data[i].as_ref(), cfg.beta, &noise, w, &mut grad)?;
                sum.recon += parts.recon;
                sum.kl += parts.kl;
                sum.total += parts.total;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingFailure {
                    epoch,
                    loss: f64::NAN,
                });
            }
            adam.step(model.params_mut(), &grad, cfg);
        }
        let n = data.len() as f64;
        let e = EpochLoss {
            epoch,
            recon: sum.recon / n,
            kl: sum.kl / n,
            total: sum.total / n,
        };
        log::debug!("epoch {epoch}: recon {:.4} kl {:.4} total {:.4}", e.recon, e.kl, e.total);
        if !e.total.is_finite() || e.total > DIVERGENCE_LIMIT {
            return Err(Error::TrainingFailure { epoch, loss: e.total });
        }
        trace.push(e);
    }
    Ok(trace)
}

/// Writes the trace as CSV with header `epoch,recon,kl,total`.
pub fn write_loss_trace(trace: &[EpochLoss], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "epoch,recon,kl,total")?;
    for e in trace {
        writeln!(f, "{},{},{},{}", e.epoch, e.recon, e.kl, e.total)?;
    }
    f.flush()?;
    Ok(())
}
