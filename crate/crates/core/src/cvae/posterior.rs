//! Non-circular diagonal complex Gaussian posterior.
//!
//! `sigma` is the per-dimension variance `E|x−μ|²` and `delta` the
//! pseudo-variance `E[(x−μ)²]`; validity is `|δ_j| < σ_j`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::C64;

/// Added to the softplus output so that `σ` stays strictly positive.
pub const EPS_NUM: f64 = 1e-6;
/// Lower bound applied to `σ + Re δ` and `σ² − |δ|²` before roots and divisions.
const FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorParams {
    pub mu: Vec<C64>,
    pub sigma: Vec<f64>,
    pub delta: Vec<C64>,
}

impl PosteriorParams {
    pub fn new(mu: Vec<C64>, sigma: Vec<f64>, delta: Vec<C64>) -> Result<Self> {
        let p = Self { mu, sigma, delta };
        p.validate()?;
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.mu.len();
        if self.sigma.len() != q || self.delta.len() != q {
            return Err(Error::invalid(format!(
                "posterior lengths differ: mu {q}, sigma {}, delta {}",
                self.sigma.len(),
                self.delta.len()
            )));
        }
        for (j, (&s, d)) in self.sigma.iter().zip(&self.delta).enumerate() {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("sigma[{j}] = {s} is not positive")));
            }
            if !(d.norm() < s) {
                return Err(Error::invalid(format!(
                    "|delta[{j}]| = {} is not below sigma = {s}",
                    d.norm()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReparamScales {
    pub k_r: Vec<C64>,
    pub k_i: Vec<f64>,
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `σ = softplus(s̃) + ε`, `δ = σ·δ̃/(1 + |δ̃|)`.
pub fn constrain_sigma_delta(s_raw: &[f64], delta_raw: &[C64]) -> Result<(Vec<f64>, Vec<C64>)> {
    if s_raw.len() != delta_raw.len() {
        return Err(Error::invalid("raw sigma and delta heads differ in length"));
    }
    let sigma: Vec<f64> = s_raw.iter().map(|&s| softplus(s) + EPS_NUM).collect();
    let delta = sigma
        .iter()
        .zip(delta_raw)
        .map(|(&s, &d)| d * (s / (1.0 + d.norm())))
        .collect();
    Ok((sigma, delta))
}

fn scales_one(sigma: f64, delta: C64) -> (C64, f64) {
    let a = (sigma + delta.re).max(FLOOR);
    let s = (2.0 * a).sqrt();
    let det = (sigma * sigma - delta.norm_sqr()).max(FLOOR);
    ((C64::new(sigma, 0.0) + delta) / s, det.sqrt() / s)
}

/// `k_r = (σ+δ)/√(2(σ+Re δ))`, `k_i = √(σ²−|δ|²)/√(2(σ+Re δ))`.
///
/// `k_r` is complex whenever `δ` is; only then do `|k_r|² + k_i² = σ` and
/// `k_r² − k_i² = δ` both hold.
pub fn reparam_scales(sigma: &[f64], delta: &[C64]) -> Result<ReparamScales> {
    let post = PosteriorParams {
        mu: vec![C64::new(0.0, 0.0); sigma.len()],
        sigma: sigma.to_vec(),
        delta: delta.to_vec(),
    };
    post.validate()?;
    let (k_r, k_i) = sigma
        .iter()
        .zip(delta)
        .map(|(&s, &d)| scales_one(s, d))
        .unzip();
    Ok(ReparamScales { k_r, k_i })
}

/// Real standard normal noise pair driving one latent draw.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentNoise {
    pub eps_r: Vec<f64>,
    pub eps_i: Vec<f64>,
}

impl LatentNoise {
    pub fn draw<R: Rng + ?Sized>(q: usize, rng: &mut R) -> Self {
        let mut eps_r = Vec::with_capacity(q);
        let mut eps_i = Vec::with_capacity(q);
        for _ in 0..q {
            eps_r.push(rng.sample(StandardNormal));
            eps_i.push(rng.sample(StandardNormal));
        }
        Self { eps_r, eps_i }
    }

    pub fn zeros(q: usize) -> Self {
        Self {
            eps_r: vec![0.0; q],
            eps_i: vec![0.0; q],
        }
    }
}

/// `x = μ + k_r ε_r + i k_i ε_i`.
pub fn latent_from_noise(post: &PosteriorParams, noise: &LatentNoise) -> Result<Vec<C64>> {
    let sc = reparam_scales(&post.sigma, &post.delta)?;
    if noise.eps_r.len() != post.dim() || noise.eps_i.len() != post.dim() {
        return Err(Error::invalid("latent noise length differs from posterior"));
    }
    Ok((0..post.dim())
        .map(|j| {
            post.mu[j] + sc.k_r[j] * noise.eps_r[j] + C64::new(0.0, sc.k_i[j] * noise.eps_i[j])
        })
        .collect())
}

pub fn sample_latent<R: Rng + ?Sized>(post: &PosteriorParams, rng: &mut R) -> Result<Vec<C64>> {
    latent_from_noise(post, &LatentNoise::draw(post.dim(), rng))
}

/// `μᴴμ + Σ_j (σ_j − ½ ln(σ_j² − |δ_j|²))`.
///
/// Exceeds the exact divergence to `CN(0, I)` by the constant `q`.
pub fn kl_closed_form(post: &PosteriorParams) -> Result<f64> {
    if post.sigma.len() != post.dim() || post.delta.len() != post.dim() {
        return Err(Error::invalid("posterior lengths differ"));
    }
    let mut kl: f64 = post.mu.iter().map(|m| m.norm_sqr()).sum();
    for (j, (&s, d)) in post.sigma.iter().zip(&post.delta).enumerate() {
        let det = s * s - d.norm_sqr();
        if !(det > 0.0) {
            return Err(Error::invalid(format!(
                "σ² − |δ|² = {det} is not positive in dimension {j}"
            )));
        }
        kl += s - 0.5 * det.ln();
    }
    Ok(kl)
}

/// Gradients of a scalar loss with respect to the raw heads, in the
/// `∂/∂re + i·∂/∂im` convention.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct HeadGrads {
    pub mu: Vec<C64>,
    pub s_raw: Vec<f64>,
    pub delta_raw: Vec<C64>,
}

/// Backpropagates `g_x` (latent) and `kl_weight·∂KL` to the raw heads.
pub(crate) fn backward_heads(
    s_raw: &[f64],
    delta_raw: &[C64],
    mu: &[C64],
    noise: &LatentNoise,
    g_x: &[C64],
    kl_weight: f64,
) -> HeadGrads {
    let q = s_raw.len();
    let mut out = HeadGrads {
        mu: vec![C64::new(0.0, 0.0); q],
        s_raw: vec![0.0; q],
        delta_raw: vec![C64::new(0.0, 0.0); q],
    };
    for j in 0..q {
        let sig = softplus(s_raw[j]) + EPS_NUM;
        let dr = delta_raw[j];
        let r = dr.norm();
        let u = dr / (1.0 + r);
        let delta = u * sig;

        let a = (sig + delta.re).max(FLOOR);
        let s = (2.0 * a).sqrt();
        let s3 = s * s * s;
        let det = (sig * sig - delta.norm_sqr()).max(FLOOR);
        let rd = det.sqrt();

        let (er, ei) = (noise.eps_r[j], noise.eps_i[j]);
        let g = g_x[j];
        let g_kr_re = g.re * er;
        let g_kr_im = g.im * er;
        let g_ki = g.im * ei;

        // Partials of (Re k_r, Im k_r, k_i) with respect to (σ, Re δ, Im δ).
        let mut g_sig = g_kr_re * (0.5 / s) + g_kr_im * (-delta.im / s3)
            + g_ki * (sig / (rd * s) - rd / s3);
        let mut g_dre = g_kr_re * (0.5 / s) + g_kr_im * (-delta.im / s3)
            + g_ki * (-delta.re / (rd * s) - rd / s3);
        let mut g_dim = g_kr_im / s + g_ki * (-delta.im / (rd * s));

        g_sig += kl_weight * (1.0 - sig / det);
        g_dre += kl_weight * delta.re / det;
        g_dim += kl_weight * delta.im / det;

        let g_delta = C64::new(g_dre, g_dim);
        g_sig += (g_delta.conj() * u).re;
        let g_u = g_delta * sig;
        let mut g_dr = g_u / (1.0 + r);
        if r > 0.0 {
            g_dr -= dr * ((g_u.conj() * dr).re / (r * (1.0 + r) * (1.0 + r)));
        }

        out.s_raw[j] = g_sig * sigmoid(s_raw[j]);
        out.delta_raw[j] = g_dr;
        out.mu[j] = g + mu[j] * (2.0 * kl_weight);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn constrain_examples() {
        let (s, d) = constrain_sigma_delta(&[0.0], &[c(0.0, 0.0)]).unwrap();
        assert!((s[0] - (2f64.ln() + EPS_NUM)).abs() < 1e-15);
        assert_eq!(d[0], c(0.0, 0.0));
        let (s, d) = constrain_sigma_delta(&[0.0], &[c(1.0, 0.0)]).unwrap();
        assert!((s[0] - 0.693_147_180_6).abs() < 2e-6);
        assert!((d[0].re - 0.346_573_590_3).abs() < 2e-6);
        assert_eq!(d[0].im, 0.0);
        let (s, d) = constrain_sigma_delta(&[3.0], &[c(1e12, -1e12)]).unwrap();
        assert!(d[0].norm() < s[0]);
        assert!(d[0].norm() / s[0] > 1.0 - 1e-11);
        let (_, d) = constrain_sigma_delta(&[0.5], &[c(-0.3, 0.7)]).unwrap();
        assert!((d[0].arg() - c(-0.3, 0.7).arg()).abs() < 1e-14);
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
        assert!(softplus(-1000.0) >= 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn reparam_examples() {
        let sc = reparam_scales(&[1.0], &[c(0.0, 0.0)]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((sc.k_r[0] - c(h, 0.0)).norm() < 1e-15);
        assert!((sc.k_i[0] - h).abs() < 1e-15);
        let sc = reparam_scales(&[2.0], &[c(2.0 * (1.0 - 1e-12), 0.0)]).unwrap();
        assert!(sc.k_i[0] < 1e-5);
        assert!((sc.k_r[0].re - 2f64.sqrt()).abs() < 1e-10);
        assert!(matches!(
            reparam_scales(&[1.0], &[c(1.0, 0.0)]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn reparam_identities_hold_for_random_posteriors() {
        use rand::Rng;
        let mut rng = substream(11, &[]);
        for _ in 0..10_000 {
            let s_raw = rng.random_range(-8.0..8.0);
            let d_raw = c(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
            let (s, d) = constrain_sigma_delta(&[s_raw], &[d_raw]).unwrap();
            let sc = reparam_scales(&s, &d).unwrap();
            let (kr, ki) = (sc.k_r[0], sc.k_i[0]);
            let var = kr.norm_sqr() + ki * ki;
            let pv = kr * kr - ki * ki;
            assert!((var - s[0]).abs() <= 1e-10 * s[0]);
            assert!((pv - d[0]).norm() <= 1e-10 * s[0]);
        }
    }

    #[test]
    fn kl_examples() {
        let q = 5;
        let p = PosteriorParams::new(vec![c(0.0, 0.0); q], vec![1.0; q], vec![c(0.0, 0.0); q]).unwrap();
        assert!((kl_closed_form(&p).unwrap() - q as f64).abs() < 1e-15);
        let p = PosteriorParams::new(vec![c(1.0, 0.0)], vec![1.0], vec![c(0.0, 0.0)]).unwrap();
        assert!((kl_closed_form(&p).unwrap() - 2.0).abs() < 1e-15);
        let p = PosteriorParams::new(vec![c(0.0, 0.0)], vec![2.0], vec![c(1.0, 0.0)]).unwrap();
        assert!((kl_closed_form(&p).unwrap() - 1.450_693_855_665_945).abs() < 1e-12);
        let bad = PosteriorParams {
            mu: vec![c(0.0, 0.0)],
            sigma: vec![1.0],
            delta: vec![c(1.0, 0.0)],
        };
        assert!(kl_closed_form(&bad).is_err());
    }

    #[test]
    fn kl_is_stationary_at_standard_prior() {
        let f = |s: f64, dr: f64, di: f64| {
            kl_closed_form(&PosteriorParams {
                mu: vec![c(0.0, 0.0)],
                sigma: vec![s],
                delta: vec![c(dr, di)],
            })
            .unwrap()
        };
        let h = 1e-5;
        assert!(((f(1.0 + h, 0.0, 0.0) - f(1.0 - h, 0.0, 0.0)) / (2.0 * h)).abs() < 1e-8);
        assert!(((f(1.0, h, 0.0) - f(1.0, -h, 0.0)) / (2.0 * h)).abs() < 1e-8);
        assert!(((f(1.0, 0.0, h) - f(1.0, 0.0, -h)) / (2.0 * h)).abs() < 1e-8);
        for &(s, dr, di) in &[(1.3, 0.0, 0.0), (0.7, 0.1, 0.0), (1.0, 0.0, -0.2)] {
            assert!(f(s, dr, di) > f(1.0, 0.0, 0.0));
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        use rand::Rng;
        let mut rng = substream(12, &[]);
        for _ in 0..200 {
            let s_raw = rng.random_range(-3.0..3.0);
            let d_raw = c(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let mu = c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let noise = LatentNoise::draw(1, &mut rng);
            let w = c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let beta = 0.37;
            // L = Re(conj(w)·x) + β·KL.
            let loss = |s: f64, d: C64, m: C64| {
                let (sg, dl) = constrain_sigma_delta(&[s], &[d]).unwrap();
                let post = PosteriorParams::new(vec![m], sg, dl).unwrap();
                let x = latent_from_noise(&post, &noise).unwrap();
                (w.conj() * x[0]).re + beta * kl_closed_form(&post).unwrap()
            };
            let g = backward_heads(&[s_raw], &[d_raw], &[mu], &noise, &[w], beta);
            let h = 1e-6;
            let fd = |a: f64, b: f64| (a - b) / (2.0 * h);
            let gs = fd(loss(s_raw + h, d_raw, mu), loss(s_raw - h, d_raw, mu));
            let gdr = fd(loss(s_raw, d_raw + h, mu), loss(s_raw, d_raw - h, mu));
            let gdi = fd(
                loss(s_raw, d_raw + c(0.0, h), mu),
                loss(s_raw, d_raw - c(0.0, h), mu),
            );
            let gmr = fd(loss(s_raw, d_raw, mu + h), loss(s_raw, d_raw, mu - h));
            let tol = |x: f64| 1e-6 * x.abs().max(1.0);
            assert!((g.s_raw[0] - gs).abs() < tol(gs), "{} {gs}", g.s_raw[0]);
            assert!((g.delta_raw[0].re - gdr).abs() < tol(gdr));
            assert!((g.delta_raw[0].im - gdi).abs() < tol(gdi));
            assert!((g.mu[0].re - gmr).abs() < tol(gmr));
        }
    }
}
