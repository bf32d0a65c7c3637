//! Encoder, heads and decoder of the complex VAE.
//!
//! Parameters live in one flat `f64` vector; complex tensors are interleaved
//! `(re, im)` pairs and viewed as `C64` slices.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    activation_backward, activation_forward, conv_same_backward, conv_same_forward,
    conv_transpose_backward, conv_transpose_forward, conv_transpose_len, dense_backward,
    dense_forward, maxpool_backward, maxpool_forward, Activation, ChannelNorm,
};
use super::posterior::{
    backward_heads, constrain_sigma_delta, kl_closed_form, latent_from_noise, LatentNoise,
    PosteriorParams,
};
use crate::error::{Error, Result};
use crate::linalg::{all_finite, C64};
use crate::rng::complex_normal;

const ZERO: C64 = C64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlockSpec {
    pub channels: usize,
    pub kernel: usize,
    pub pool: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvaeArchitecture {
    pub input_len: usize,
    pub blocks: Vec<ConvBlockSpec>,
    pub activation: Activation,
    pub latent_dim: usize,
}

impl Default for CvaeArchitecture {
    fn default() -> Self {
        Self {
            input_len: 16,
            blocks: vec![
                ConvBlockSpec {
                    channels: 8,
                    kernel: 5,
                    pool: 2,
                },
                ConvBlockSpec {
                    channels: 16,
                    kernel: 5,
                    pool: 2,
                },
            ],
            activation: Activation::ModRelu,
            latent_dim: 8,
        }
    }
}

impl CvaeArchitecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_len == 0 || self.latent_dim == 0 {
            return Err(Error::invalid("input length and latent size must be positive"));
        }
        if self.blocks.is_empty() {
            return Err(Error::invalid("at least one conv block is required"));
        }
        let mut len = self.input_len;
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.pool == 0 {
                return Err(Error::invalid(format!("block {i}: channels and pool must be positive")));
            }
            if b.kernel % 2 == 0 {
                return Err(Error::invalid(format!("block {i}: kernel {} must be odd", b.kernel)));
            }
            if len % b.pool != 0 {
                return Err(Error::invalid(format!(
                    "block {i}: pool {} does not divide length {len}",
                    b.pool
                )));
            }
            len /= b.pool;
        }
        Ok(())
    }

    /// Feature-map length entering block `k` (`k = blocks.len()` gives the bottleneck).
    fn len_at(&self, k: usize) -> usize {
        self.blocks[..k].iter().fold(self.input_len, |l, b| l / b.pool)
    }

    fn channels_at(&self, k: usize) -> usize {
        if k == 0 {
            1
        } else {
            self.blocks[k - 1].channels
        }
    }

    fn bottleneck(&self) -> usize {
        let k = self.blocks.len();
        self.channels_at(k) * self.len_at(k)
    }

    fn has_act_bias(&self) -> bool {
        self.activation == Activation::ModRelu
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    /// Offset into the flat `f64` parameter vector.
    pub offset: usize,
    /// Number of elements (complex or real).
    pub numel: usize,
    pub complex: bool,
}

impl TensorSpec {
    fn width(&self) -> usize {
        if self.complex {
            2 * self.numel
        } else {
            self.numel
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct EncIds {
    w: usize,
    b: usize,
    act: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct DecIds {
    w: usize,
    b: usize,
    /// Present on every transposed conv except the output layer.
    act: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct HeadIds {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    tensors: Vec<TensorSpec>,
    enc: Vec<EncIds>,
    heads: [HeadIds; 3],
    dense: HeadIds,
    dense_act: Option<usize>,
    /// Ordered from the bottleneck outwards.
    dec: Vec<DecIds>,
    total: usize,
}

impl Layout {
    fn new(arch: &CvaeArchitecture) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut push = |name: String, numel: usize, complex: bool| {
            let t = TensorSpec {
                name,
                offset: total,
                numel,
                complex,
            };
            total += t.width();
            tensors.push(t);
            tensors.len() - 1
        };
        let act = arch.has_act_bias();
        let mut enc = Vec::new();
        for (k, b) in arch.blocks.iter().enumerate() {
            let c_in = arch.channels_at(k);
            enc.push(EncIds {
                w: push(format!("enc.{k}.conv.weight"), b.channels * c_in * b.kernel, true),
                b: push(format!("enc.{k}.conv.bias"), b.channels, true),
                act: act.then(|| push(format!("enc.{k}.act.bias"), b.channels, false)),
            });
        }
        let f = arch.bottleneck();
        let q = arch.latent_dim;
        let heads = ["mu", "sigma", "delta"].map(|h| HeadIds {
            w: push(format!("head.{h}.weight"), q * f, true),
            b: push(format!("head.{h}.bias"), q, true),
        });
        let dense = HeadIds {
            w: push("dec.dense.weight".into(), f * q, true),
            b: push("dec.dense.bias".into(), f, true),
        };
        let kb = arch.blocks.len();
        let dense_act = act.then(|| push("dec.dense.act.bias".into(), arch.channels_at(kb), false));
        let mut dec = Vec::new();
        for k in (1..=kb).rev() {
            let b = arch.blocks[k - 1];
            let (c_in, c_out) = (arch.channels_at(k), arch.channels_at(k - 1));
            dec.push(DecIds {
                w: push(format!("dec.{}.deconv.weight", kb - k), c_in * c_out * b.kernel, true),
                b: push(format!("dec.{}.deconv.bias", kb - k), c_out, true),
                act: (k > 1 && act).then(|| push(format!("dec.{}.act.bias", kb - k), c_out, false)),
            });
        }
        Self {
            tensors,
            enc,
            heads,
            dense,
            dense_act,
            dec,
            total,
        }
    }

    fn c<'a>(&self, p: &'a [f64], id: usize) -> &'a [C64] {
        let t = &self.tensors[id];
        bytemuck::cast_slice(&p[t.offset..t.offset + t.width()])
    }

    fn c_mut<'a>(&self, p: &'a mut [f64], id: usize) -> &'a mut [C64] {
        let t = &self.tensors[id];
        bytemuck::cast_slice_mut(&mut p[t.offset..t.offset + t.width()])
    }

    fn r<'a>(&self, p: &'a [f64], id: Option<usize>) -> &'a [f64] {
        match id {
            Some(id) => {
                let t = &self.tensors[id];
                &p[t.offset..t.offset + t.numel]
            }
            None => &[],
        }
    }

    fn r_mut<'a>(&self, p: &'a mut [f64], id: Option<usize>) -> &'a mut [f64] {
        match id {
            Some(id) => {
                let t = &self.tensors[id];
                &mut p[t.offset..t.offset + t.numel]
            }
            None => &mut [],
        }
    }
}

/// Per-sample activations kept for the backward pass.
#[derive(Debug, Clone, Default)]
struct Cache {
    enc_in: Vec<Vec<C64>>,
    enc_conv: Vec<Vec<C64>>,
    enc_norm: Vec<Vec<C64>>,
    enc_pool_arg: Vec<Vec<usize>>,
    bottleneck: Vec<C64>,
    s_raw: Vec<f64>,
    delta_raw: Vec<C64>,
    post: Option<PosteriorParams>,
    latent: Vec<C64>,
    dense_out: Vec<C64>,
    dec_in: Vec<Vec<C64>>,
    dec_out: Vec<Vec<C64>>,
    dec_norm: Vec<Vec<C64>>,
    recon: Vec<C64>,
}

/// Reconstruction and KL terms of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub recon: f64,
    pub kl: f64,
    pub total: f64,
}

/// Complex VAE: architecture, flat parameters and frozen normalization buffers.
#[derive(Debug, Clone)]
pub struct Cvae {
    arch: CvaeArchitecture,
    layout: Layout,
    params: Vec<f64>,
    enc_norms: Vec<ChannelNorm>,
    dec_norms: Vec<ChannelNorm>,
}

fn numeric_check(layer: usize, name: &str, v: &[C64]) -> Result<()> {
    if all_finite(v) {
        Ok(())
    } else {
        Err(Error::NumericFailure {
            layer,
            name: name.to_string(),
        })
    }
}

impl Cvae {
    /// Complex Gaussian weights with `E|w|² = 1/fan_in`, zero biases, identity norms.
    pub fn new<R: Rng + ?Sized>(arch: CvaeArchitecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.total];
        let kb = arch.blocks.len();
        let mut init = |id: usize, fan_in: usize, params: &mut [f64]| {
            let s = (1.0 / fan_in as f64).sqrt();
            for w in layout.c_mut(params, id) {
                *w = complex_normal(rng) * s;
            }
        };
        for (k, ids) in layout.enc.iter().enumerate() {
            init(ids.w, arch.channels_at(k) * arch.blocks[k].kernel, &mut params);
        }
        for h in &layout.heads {
            init(h.w, arch.bottleneck(), &mut params);
        }
        init(layout.dense.w, arch.latent_dim, &mut params);
        for (i, ids) in layout.dec.iter().enumerate() {
            let b = arch.blocks[kb - 1 - i];
            let fan = arch.channels_at(kb - i) * b.kernel.div_ceil(b.pool);
            init(ids.w, fan, &mut params);
        }
        let enc_norms = (1..=kb).map(|k| ChannelNorm::identity(arch.channels_at(k))).collect();
        let dec_norms = (1..kb).rev().map(|k| ChannelNorm::identity(arch.channels_at(k))).collect();
        Ok(Self {
            arch,
            layout,
            params,
            enc_norms,
            dec_norms,
        })
    }

    /// Rebuilds a model from stored parts, checking every shape.
    pub fn from_parts(
        arch: CvaeArchitecture,
        params: Vec<f64>,
        enc_norms: Vec<ChannelNorm>,
        dec_norms: Vec<ChannelNorm>,
    ) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if params.len() != layout.total {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameters contain non-finite values"));
        }
        let kb = arch.blocks.len();
        let enc_ok = enc_norms.len() == kb
            && enc_norms.iter().enumerate().all(|(k, n)| n.channels() == arch.channels_at(k + 1));
        let dec_ok = dec_norms.len() == kb - 1
            && dec_norms
                .iter()
                .zip((1..kb).rev())
                .all(|(n, k)| n.channels() == arch.channels_at(k));
        if !enc_ok || !dec_ok {
            return Err(Error::invalid("normalization buffers do not match the architecture"));
        }
        Ok(Self {
            arch,
            layout,
            params,
            enc_norms,
            dec_norms,
        })
    }

    pub fn architecture(&self) -> &CvaeArchitecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.layout.tensors
    }

    pub fn enc_norms(&self) -> &[ChannelNorm] {
        &self.enc_norms
    }

    pub fn dec_norms(&self) -> &[ChannelNorm] {
        &self.dec_norms
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, z: &[C64]) -> Result<()> {
        if z.len() != self.arch.input_len {
            return Err(Error::invalid(format!(
                "profile length {} differs from model input {}",
                z.len(),
                self.arch.input_len
            )));
        }
        Ok(())
    }

    fn encode_cached(&self, z: &[C64], cache: &mut Cache) -> Result<PosteriorParams> {
        let (l, p, a) = (&self.layout, &self.params, &self.arch);
        let mut x = z.to_vec();
        cache.enc_in.clear();
        cache.enc_conv.clear();
        cache.enc_norm.clear();
        cache.enc_pool_arg.clear();
        for (k, ids) in l.enc.iter().enumerate() {
            let b = a.blocks[k];
            let (c_in, len) = (a.channels_at(k), a.len_at(k));
            let mut conv = vec![ZERO; b.channels * len];
            conv_same_forward(&x, c_in, len, l.c(p, ids.w), l.c(p, ids.b), b.channels, b.kernel, &mut conv);
            numeric_check(k, "encoder conv", &conv)?;
            let mut normed = vec![ZERO; conv.len()];
            self.enc_norms[k].forward(&conv, len, &mut normed);
            let mut act = vec![ZERO; conv.len()];
            activation_forward(a.activation, &normed, l.r(p, ids.act), len, &mut act);
            let out_len = len / b.pool;
            let mut pooled = vec![ZERO; b.channels * out_len];
            let mut arg = vec![0; pooled.len()];
            maxpool_forward(&act, b.channels, len, b.pool, &mut pooled, &mut arg);
            numeric_check(k, "encoder block", &pooled)?;
            cache.enc_in.push(std::mem::replace(&mut x, pooled));
            cache.enc_conv.push(conv);
            cache.enc_norm.push(normed);
            cache.enc_pool_arg.push(arg);
        }
        let q = a.latent_dim;
        let mut heads = [vec![ZERO; q], vec![ZERO; q], vec![ZERO; q]];
        for (h, ids) in heads.iter_mut().zip(&l.heads) {
            dense_forward(&x, l.c(p, ids.w), l.c(p, ids.b), h);
        }
        let nl = a.blocks.len();
        for h in &heads {
            numeric_check(nl, "posterior head", h)?;
        }
        let [mu, s_full, delta_raw] = heads;
        let s_raw: Vec<f64> = s_full.iter().map(|v| v.re).collect();
        let (sigma, delta) = constrain_sigma_delta(&s_raw, &delta_raw)?;
        let post = PosteriorParams { mu, sigma, delta };
        if post.validate().is_err() {
            return Err(Error::NumericFailure {
                layer: nl,
                name: "posterior constraint".into(),
            });
        }
        cache.bottleneck = x;
        cache.s_raw = s_raw;
        cache.delta_raw = delta_raw;
        cache.post = Some(post.clone());
        Ok(post)
    }

    fn decode_cached(&self, latent: &[C64], cache: &mut Cache) -> Result<Vec<C64>> {
        let (l, p, a) = (&self.layout, &self.params, &self.arch);
        let kb = a.blocks.len();
        let first = kb + 1;
        numeric_check(first, "latent", latent)?;
        let mut dense = vec![ZERO; a.bottleneck()];
        dense_forward(latent, l.c(p, l.dense.w), l.c(p, l.dense.b), &mut dense);
        let mut x = vec![ZERO; dense.len()];
        activation_forward(a.activation, &dense, l.r(p, l.dense_act), a.len_at(kb), &mut x);
        numeric_check(first, "decoder dense", &x)?;
        cache.latent = latent.to_vec();
        cache.dense_out = dense;
        cache.dec_in.clear();
        cache.dec_out.clear();
        cache.dec_norm.clear();
        for (i, ids) in l.dec.iter().enumerate() {
            let k = kb - i;
            let b = a.blocks[k - 1];
            let (c_in, c_out) = (a.channels_at(k), a.channels_at(k - 1));
            let (len_in, pad) = (a.len_at(k), b.kernel / 2);
            let len_out = conv_transpose_len(len_in, b.pool, b.kernel, pad, b.pool - 1);
            let mut y = vec![ZERO; c_out * len_out];
            conv_transpose_forward(
                &x, c_in, len_in, l.c(p, ids.w), l.c(p, ids.b), c_out, b.kernel, b.pool, pad, len_out, &mut y,
            );
            numeric_check(first + 1 + i, "decoder deconv", &y)?;
            let next = if k > 1 {
                let mut normed = vec![ZERO; y.len()];
                self.dec_norms[i].forward(&y, len_out, &mut normed);
                let mut act = vec![ZERO; y.len()];
                activation_forward(a.activation, &normed, l.r(p, ids.act), len_out, &mut act);
                cache.dec_norm.push(normed);
                act
            } else {
                y.clone()
            };
            cache.dec_in.push(std::mem::replace(&mut x, next));
            cache.dec_out.push(y);
        }
        cache.recon = x.clone();
        Ok(x)
    }

    pub fn encode(&self, z: &[C64]) -> Result<PosteriorParams> {
        self.check_input(z)?;
        self.encode_cached(z, &mut Cache::default())
    }

    pub fn decode(&self, latent: &[C64]) -> Result<Vec<C64>> {
        if latent.len() != self.arch.latent_dim {
            return Err(Error::invalid(format!(
                "latent length {} differs from {}",
                latent.len(),
                self.arch.latent_dim
            )));
        }
        self.decode_cached(latent, &mut Cache::default())
    }

    /// Reconstruction decoded from the posterior mean.
    pub fn reconstruct(&self, z: &[C64]) -> Result<Vec<C64>> {
        let mut cache = Cache::default();
        self.check_input(z)?;
        let post = self.encode_cached(z, &mut cache)?;
        self.decode_cached(&post.mu, &mut cache)
    }

    /// `Σ_n |z_n − ẑ_n|²` with `ẑ` decoded from `μ`.
    pub fn recon_score(&self, z: &[C64]) -> Result<f64> {
        Ok(reconstruction_error(z, &self.reconstruct(z)?))
    }

    /// Score with `ẑ` decoded from one posterior sample.
    pub fn recon_score_sampled<R: Rng + ?Sized>(&self, z: &[C64], rng: &mut R) -> Result<f64> {
        let post = self.encode(z)?;
        let x = latent_from_noise(&post, &LatentNoise::draw(post.dim(), rng))?;
        Ok(reconstruction_error(z, &self.decode(&x)?))
    }

    /// `‖z − ẑ‖² + β·KL` for the latent drawn with `noise`.
    pub fn elbo_loss(&self, z: &[C64], beta: f64, noise: &LatentNoise) -> Result<LossParts> {
        self.check_input(z)?;
        let mut cache = Cache::default();
        self.forward_loss(z, beta, noise, &mut cache)
    }

    pub fn elbo_loss_sampled<R: Rng + ?Sized>(&self, z: &[C64], beta: f64, rng: &mut R) -> Result<LossParts> {
        self.elbo_loss(z, beta, &LatentNoise::draw(self.arch.latent_dim, rng))
    }

    fn forward_loss(&self, z: &[C64], beta: f64, noise: &LatentNoise, cache: &mut Cache) -> Result<LossParts> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!("beta must be nonnegative, got {beta}")));
        }
        let post = self.encode_cached(z, cache)?;
        let x = latent_from_noise(&post, noise)?;
        let zh = self.decode_cached(&x, cache)?;
        let recon = reconstruction_error(z, &zh);
        let kl = kl_closed_form(&post)?;
        Ok(LossParts {
            recon,
            kl,
            total: recon + beta * kl,
        })
    }

    /// Loss of one profile; adds `weight·∂loss/∂θ` into `grad` (same layout as the parameters).
    pub fn loss_and_grad(
        &self,
        z: &[C64],
        beta: f64,
        noise: &LatentNoise,
        weight: f64,
        grad: &mut [f64],
    ) -> Result<LossParts> {
        self.check_input(z)?;
        if grad.len() != self.params.len() {
            return Err(Error::invalid("gradient buffer does not match parameter count"));
        }
        let mut cache = Cache::default();
        let parts = self.forward_loss(z, beta, noise, &mut cache)?;
        self.backward(z, beta, noise, weight, &cache, grad);
        Ok(parts)
    }

    fn backward(&self, z: &[C64], beta: f64, noise: &LatentNoise, weight: f64, cache: &Cache, grad: &mut [f64]) {
        let (l, p, a) = (&self.layout, &self.params, &self.arch);
        let kb = a.blocks.len();

        let mut g: Vec<C64> = cache
            .recon
            .iter()
            .zip(z)
            .map(|(zh, zv)| (zh - zv) * (2.0 * weight))
            .collect();
        for (i, ids) in l.dec.iter().enumerate().rev() {
            let k = kb - i;
            let b = a.blocks[k - 1];
            let (c_in, c_out) = (a.channels_at(k), a.channels_at(k - 1));
            let (len_in, pad) = (a.len_at(k), b.kernel / 2);
            let len_out = cache.dec_out[i].len() / c_out;
            if k > 1 {
                let mut g_norm = vec![ZERO; g.len()];
                activation_backward(
                    a.activation,
                    &cache.dec_norm[i],
                    l.r(p, ids.act),
                    len_out,
                    &g,
                    &mut g_norm,
                    l.r_mut(grad, ids.act),
                );
                self.dec_norms[i].backward(&g_norm, len_out, &mut g);
            }
            let mut gx = vec![ZERO; c_in * len_in];
            let mut gw = vec![ZERO; l.tensors[ids.w].numel];
            let mut gb = vec![ZERO; c_out];
            conv_transpose_backward(
                &cache.dec_in[i], c_in, len_in, l.c(p, ids.w), c_out, b.kernel, b.pool, pad, len_out, &g, &mut gx,
                &mut gw, &mut gb,
            );
            add_c(l.c_mut(grad, ids.w), &gw);
            add_c(l.c_mut(grad, ids.b), &gb);
            g = gx;
        }
        let mut g_dense = vec![ZERO; g.len()];
        activation_backward(
            a.activation,
            &cache.dense_out,
            l.r(p, l.dense_act),
            a.len_at(kb),
            &g,
            &mut g_dense,
            l.r_mut(grad, l.dense_act),
        );
        let mut g_lat = vec![ZERO; a.latent_dim];
        let mut gw = vec![ZERO; l.tensors[l.dense.w].numel];
        let mut gb = vec![ZERO; g_dense.len()];
        dense_backward(&cache.latent, l.c(p, l.dense.w), &g_dense, Some(&mut g_lat), &mut gw, &mut gb);
        add_c(l.c_mut(grad, l.dense.w), &gw);
        add_c(l.c_mut(grad, l.dense.b), &gb);

        let post = cache.post.as_ref().expect("forward pass populates the posterior");
        let hg = backward_heads(&cache.s_raw, &cache.delta_raw, &post.mu, noise, &g_lat, beta * weight);
        let g_s: Vec<C64> = hg.s_raw.iter().map(|&v| C64::new(v, 0.0)).collect();
        let mut g_h = vec![ZERO; cache.bottleneck.len()];
        let mut gx = vec![ZERO; cache.bottleneck.len()];
        for (ids, gy) in l.heads.iter().zip([&hg.mu, &g_s, &hg.delta_raw]) {
            let mut gw = vec![ZERO; l.tensors[ids.w].numel];
            let mut gb = vec![ZERO; gy.len()];
            dense_backward(&cache.bottleneck, l.c(p, ids.w), gy, Some(&mut gx), &mut gw, &mut gb);
            add_c(l.c_mut(grad, ids.w), &gw);
            add_c(l.c_mut(grad, ids.b), &gb);
            add_c(&mut g_h, &gx);
        }

        let mut g = g_h;
        for (k, ids) in l.enc.iter().enumerate().rev() {
            let b = a.blocks[k];
            let (c_in, len) = (a.channels_at(k), a.len_at(k));
            let mut g_act = vec![ZERO; b.channels * len];
            maxpool_backward(&g, &cache.enc_pool_arg[k], &mut g_act);
            let mut g_norm = vec![ZERO; g_act.len()];
            activation_backward(
                a.activation,
                &cache.enc_norm[k],
                l.r(p, ids.act),
                len,
                &g_act,
                &mut g_norm,
                l.r_mut(grad, ids.act),
            );
            let mut g_conv = vec![ZERO; g_norm.len()];
            self.enc_norms[k].backward(&g_norm, len, &mut g_conv);
            let mut gw = vec![ZERO; l.tensors[ids.w].numel];
            let mut gb = vec![ZERO; b.channels];
            let mut gx = vec![ZERO; c_in * len];
            conv_same_backward(
                &cache.enc_in[k],
                c_in,
                len,
                l.c(p, ids.w),
                b.channels,
                b.kernel,
                &g_conv,
                (k > 0).then_some(gx.as_mut_slice()),
                &mut gw,
                &mut gb,
            );
            add_c(l.c_mut(grad, ids.w), &gw);
            add_c(l.c_mut(grad, ids.b), &gb);
            g = gx;
        }
    }

    /// Refits every normalization buffer, in forward order, on `data`.
    ///
    /// Decoder statistics are taken on reconstructions from `μ`.
    pub fn refresh_norms<Z: AsRef<[C64]>>(&mut self, data: &[Z]) -> Result<()> {
        if data.is_empty() {
            return Ok(());
        }
        let kb = self.arch.blocks.len();
        for k in 0..kb {
            let mut maps = Vec::with_capacity(data.len());
            for z in data {
                let mut cache = Cache::default();
                self.check_input(z.as_ref())?;
                self.encode_cached(z.as_ref(), &mut cache)?;
                maps.push(cache.enc_conv.swap_remove(k));
            }
            let len = self.arch.len_at(k);
            self.enc_norms[k] =
                ChannelNorm::fit(maps.iter().map(|m| m.as_slice()), self.arch.channels_at(k + 1), len);
        }
        for i in 0..kb.saturating_sub(1) {
            let mut maps = Vec::with_capacity(data.len());
            for z in data {
                let mut cache = Cache::default();
                let post = self.encode_cached(z.as_ref(), &mut cache)?;
                self.decode_cached(&post.mu, &mut cache)?;
                maps.push(cache.dec_out.swap_remove(i));
            }
            let k = kb - i;
            let len = self.arch.len_at(k - 1);
            self.dec_norms[i] =
                ChannelNorm::fit(maps.iter().map(|m| m.as_slice()), self.arch.channels_at(k - 1), len);
        }
        Ok(())
    }

    /// Sets every modReLU bias to `value` (zero after construction).
    pub fn set_activation_biases(&mut self, value: f64) {
        for t in self.layout.tensors.iter().filter(|t| !t.complex) {
            self.params[t.offset..t.offset + t.numel].fill(value);
        }
    }
}

/// `Σ_n |z_n − ẑ_n|²`.
pub fn reconstruction_error(z: &[C64], zh: &[C64]) -> f64 {
    z.iter().zip(zh).map(|(a, b)| (a - b).norm_sqr()).sum()
}

fn add_c(dst: &mut [C64], src: &[C64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    fn tiny_arch() -> CvaeArchitecture {
        CvaeArchitecture {
            input_len: 8,
            blocks: vec![ConvBlockSpec {
                channels: 3,
                kernel: 3,
                pool: 2,
            }],
            activation: Activation::ModRelu,
            latent_dim: 2,
        }
    }

    fn profile(m: usize, seed: u64) -> Vec<C64> {
        let mut rng = substream(seed, &[]);
        (0..m).map(|_| complex_normal(&mut rng)).collect()
    }

    #[test]
    fn default_architecture_shapes() {
        let arch = CvaeArchitecture::default();
        arch.validate().unwrap();
        assert_eq!(arch.bottleneck(), 64);
        let net = Cvae::new(arch, &mut substream(1, &[])).unwrap();
        let names: Vec<&str> = net.tensors().iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names[0], "enc.0.conv.weight");
        assert!(names.contains(&"dec.1.deconv.weight"));
        assert!(!names.contains(&"dec.1.act.bias"));
        let zh = net.reconstruct(&profile(16, 2)).unwrap();
        assert_eq!(zh.len(), 16);
    }

    #[test]
    fn architecture_validation() {
        let mut a = tiny_arch();
        a.blocks[0].kernel = 4;
        assert!(a.validate().is_err());
        let mut a = tiny_arch();
        a.blocks[0].pool = 3;
        assert!(a.validate().is_err());
        let mut a = tiny_arch();
        a.latent_dim = 0;
        assert!(a.validate().is_err());
    }

    #[test]
    fn zero_input_gives_prior_like_posterior() {
        let net = Cvae::new(CvaeArchitecture::default(), &mut substream(3, &[])).unwrap();
        let post = net.encode(&[ZERO; 16]).unwrap();
        assert!(post.mu.iter().all(|m| *m == ZERO));
        for s in &post.sigma {
            assert!((s - (2f64.ln() + 1e-6)).abs() < 1e-15);
        }
        assert!(net.encode(&[ZERO; 15]).is_err());
    }

    #[test]
    fn encoding_is_deterministic_and_valid() {
        let net = Cvae::new(CvaeArchitecture::default(), &mut substream(4, &[])).unwrap();
        let other = Cvae::new(CvaeArchitecture::default(), &mut substream(4, &[])).unwrap();
        assert_eq!(net.params(), other.params());
        let mut rng = substream(5, &[]);
        for i in 0..2000 {
            let scale = 10f64.powf(rng.random_range(-3.0..3.0));
            let z: Vec<C64> = profile(16, 100 + i).iter().map(|v| v * scale).collect();
            let a = net.encode(&z).unwrap();
            a.validate().unwrap();
            assert_eq!(a, other.encode(&z).unwrap());
        }
    }

    #[test]
    fn non_finite_input_is_reported() {
        let net = Cvae::new(tiny_arch(), &mut substream(6, &[])).unwrap();
        let mut z = profile(8, 7);
        z[3] = C64::new(f64::NAN, 0.0);
        assert!(matches!(net.encode(&z), Err(Error::NumericFailure { layer: 0, .. })));
    }

    #[test]
    fn loss_components() {
        let net = Cvae::new(tiny_arch(), &mut substream(8, &[])).unwrap();
        let z = profile(8, 9);
        let noise = LatentNoise::draw(2, &mut substream(10, &[]));
        let full = net.elbo_loss(&z, 0.5, &noise).unwrap();
        let pure = net.elbo_loss(&z, 0.0, &noise).unwrap();
        assert_eq!(pure.total, pure.recon);
        assert!((full.total - (full.recon + 0.5 * full.kl)).abs() < 1e-12);
        assert!(full.total >= 0.0);
    }

    #[test]
    fn score_definition() {
        let z = profile(8, 12);
        assert_eq!(reconstruction_error(&z, &z), 0.0);
        let net = Cvae::new(tiny_arch(), &mut substream(11, &[])).unwrap();
        let zh = net.reconstruct(&z).unwrap();
        assert_eq!(net.recon_score(&z).unwrap(), reconstruction_error(&z, &zh));
        for c in [0.0, 1e-3, 1.0, 1e3] {
            let zc: Vec<C64> = z.iter().map(|v| v * c).collect();
            assert!(net.recon_score(&zc).unwrap() >= 0.0);
        }
    }

    #[test]
    fn from_parts_rejects_mismatch() {
        let net = Cvae::new(tiny_arch(), &mut substream(13, &[])).unwrap();
        let ok = Cvae::from_parts(
            tiny_arch(),
            net.params().to_vec(),
            net.enc_norms().to_vec(),
            net.dec_norms().to_vec(),
        );
        assert!(ok.is_ok());
        let bad = Cvae::from_parts(tiny_arch(), vec![0.0; 3], vec![], vec![]);
        assert!(bad.is_err());
    }
}
