//! Complex layers with explicit backward passes.
//!
//! Feature maps are channel-major `[channels × length]` slices of `C64`.
//! Gradients use the `∂L/∂re + i·∂L/∂im` convention, under which `y = w·x`
//! back-propagates as `g_x = conj(w)·g_y` and `g_w = conj(x)·g_y`.

use serde::{Deserialize, Serialize};

use crate::linalg::C64;

const ZERO: C64 = C64::new(0.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `(|z| + b)₊ · z/|z|` with a learned real bias per channel.
    ModRelu,
    /// `relu(Re z) + i·relu(Im z)`.
    CRelu,
}

/// `y[o,t] = b[o] + Σ_{c,j} w[o,c,j]·x[c, t+j−k/2]`, zero padded, stride 1.
pub fn conv_same_forward(
    x: &[C64],
    c_in: usize,
    len: usize,
    w: &[C64],
    b: &[C64],
    c_out: usize,
    k: usize,
    y: &mut [C64],
) {
    let pad = k / 2;
    for o in 0..c_out {
        let yo = &mut y[o * len..(o + 1) * len];
        yo.fill(b[o]);
        for c in 0..c_in {
            let xc = &x[c * len..(c + 1) * len];
            let wk = &w[(o * c_in + c) * k..(o * c_in + c + 1) * k];
            for (j, &wj) in wk.iter().enumerate() {
                let lo = pad.saturating_sub(j);
                let hi = (len + pad).saturating_sub(j).min(len);
                for t in lo..hi {
                    yo[t] += wj * xc[t + j - pad];
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_same_backward(
    x: &[C64],
    c_in: usize,
    len: usize,
    w: &[C64],
    c_out: usize,
    k: usize,
    gy: &[C64],
    gx: Option<&mut [C64]>,
    gw: &mut [C64],
    gb: &mut [C64],
) {
    let pad = k / 2;
    let mut gx = gx;
    if let Some(g) = gx.as_deref_mut() {
        g.fill(ZERO);
    }
    for o in 0..c_out {
        let gyo = &gy[o * len..(o + 1) * len];
        gb[o] += gyo.iter().sum::<C64>();
        for c in 0..c_in {
            let xc = &x[c * len..(c + 1) * len];
            let base = (o * c_in + c) * k;
            for j in 0..k {
                let lo = pad.saturating_sub(j);
                let hi = (len + pad).saturating_sub(j).min(len);
                let mut acc = ZERO;
                for t in lo..hi {
                    acc += xc[t + j - pad].conj() * gyo[t];
                }
                gw[base + j] += acc;
                if let Some(g) = gx.as_deref_mut() {
                    let wc = w[base + j].conj();
                    let gc = &mut g[c * len..(c + 1) * len];
                    for t in lo..hi {
                        gc[t + j - pad] += wc * gyo[t];
                    }
                }
            }
        }
    }
}

/// Output length of a transposed convolution.
pub fn conv_transpose_len(len_in: usize, stride: usize, k: usize, pad: usize, out_pad: usize) -> usize {
    (len_in - 1) * stride + k + out_pad - 2 * pad
}

/// `y[o, i·s + j − pad] += w[c,o,j]·x[c,i]`, plus bias.
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_forward(
    x: &[C64],
    c_in: usize,
    len_in: usize,
    w: &[C64],
    b: &[C64],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    len_out: usize,
    y: &mut [C64],
) {
    for o in 0..c_out {
        y[o * len_out..(o + 1) * len_out].fill(b[o]);
    }
    for c in 0..c_in {
        for o in 0..c_out {
            let wk = &w[(c * c_out + o) * k..(c * c_out + o + 1) * k];
            for i in 0..len_in {
                let xv = x[c * len_in + i];
                for (j, &wj) in wk.iter().enumerate() {
                    let t = (i * stride + j) as isize - pad as isize;
                    if t >= 0 && (t as usize) < len_out {
                        y[o * len_out + t as usize] += wj * xv;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_backward(
    x: &[C64],
    c_in: usize,
    len_in: usize,
    w: &[C64],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    len_out: usize,
    gy: &[C64],
    gx: &mut [C64],
    gw: &mut [C64],
    gb: &mut [C64],
) {
    for o in 0..c_out {
        gb[o] += gy[o * len_out..(o + 1) * len_out].iter().sum::<C64>();
    }
    gx.fill(ZERO);
    for c in 0..c_in {
        for o in 0..c_out {
            let base = (c * c_out + o) * k;
            for i in 0..len_in {
                let xv = x[c * len_in + i];
                let mut gxi = ZERO;
                for j in 0..k {
                    let t = (i * stride + j) as isize - pad as isize;
                    if t >= 0 && (t as usize) < len_out {
                        let g = gy[o * len_out + t as usize];
                        gw[base + j] += xv.conj() * g;
                        gxi += w[base + j].conj() * g;
                    }
                }
                gx[c * len_in + i] += gxi;
            }
        }
    }
}

/// `y = W·x + b` with `W` row-major `[n_out × n_in]`.
pub fn dense_forward(x: &[C64], w: &[C64], b: &[C64], y: &mut [C64]) {
    let n_in = x.len();
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        *yo = b[o] + row.iter().zip(x).map(|(a, v)| a * v).sum::<C64>();
    }
}

/// `g_x = Wᴴ g_y`, `g_W += g_y xᴴ`, `g_b += g_y`.
pub fn dense_backward(
    x: &[C64],
    w: &[C64],
    gy: &[C64],
    gx: Option<&mut [C64]>,
    gw: &mut [C64],
    gb: &mut [C64],
) {
    let n_in = x.len();
    for (o, &g) in gy.iter().enumerate() {
        gb[o] += g;
        let row = &mut gw[o * n_in..(o + 1) * n_in];
        for (r, v) in row.iter_mut().zip(x) {
            *r += v.conj() * g;
        }
    }
    if let Some(gx) = gx {
        gx.fill(ZERO);
        for (o, &g) in gy.iter().enumerate() {
            let row = &w[o * n_in..(o + 1) * n_in];
            for (gi, a) in gx.iter_mut().zip(row) {
                *gi += a.conj() * g;
            }
        }
    }
}

/// Frozen per-channel statistics: `y = (x − mean_c) / scale_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelNorm {
    pub mean: Vec<C64>,
    pub scale: Vec<f64>,
}

impl ChannelNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![ZERO; channels],
            scale: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn forward(&self, x: &[C64], len: usize, y: &mut [C64]) {
        for c in 0..self.channels() {
            let (m, s) = (self.mean[c], 1.0 / self.scale[c]);
            for t in 0..len {
                y[c * len + t] = (x[c * len + t] - m) * s;
            }
        }
    }

    pub fn backward(&self, gy: &[C64], len: usize, gx: &mut [C64]) {
        for c in 0..self.channels() {
            let s = 1.0 / self.scale[c];
            for t in 0..len {
                gx[c * len + t] = gy[c * len + t] * s;
            }
        }
    }

    /// Mean and RMS modulus (after centering) of each channel over `maps`.
    pub fn fit<'a>(maps: impl Iterator<Item = &'a [C64]>, channels: usize, len: usize) -> Self {
        let mut sum = vec![ZERO; channels];
        let mut sq = vec![0.0; channels];
        let mut n = 0usize;
        let maps: Vec<&[C64]> = maps.collect();
        for m in &maps {
            for c in 0..channels {
                sum[c] += m[c * len..(c + 1) * len].iter().sum::<C64>();
            }
            n += len;
        }
        let mean: Vec<C64> = sum.iter().map(|s| s / n.max(1) as f64).collect();
        for m in &maps {
            for c in 0..channels {
                sq[c] += m[c * len..(c + 1) * len]
                    .iter()
                    .map(|v| (v - mean[c]).norm_sqr())
                    .sum::<f64>();
            }
        }
        let scale = sq
            .iter()
            .map(|&s| {
                let r = (s / n.max(1) as f64).sqrt();
                if r > 1e-8 && r.is_finite() {
                    r
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }
}

pub fn activation_forward(act: Activation, x: &[C64], bias: &[f64], len: usize, y: &mut [C64]) {
    match act {
        Activation::ModRelu => {
            for (c, &b) in bias.iter().enumerate() {
                for t in c * len..(c + 1) * len {
                    let r = x[t].norm();
                    y[t] = if r > 0.0 && r + b > 0.0 {
                        x[t] * ((r + b) / r)
                    } else {
                        ZERO
                    };
                }
            }
        }
        Activation::CRelu => {
            for (yt, xt) in y.iter_mut().zip(x) {
                *yt = C64::new(xt.re.max(0.0), xt.im.max(0.0));
            }
        }
    }
}

/// modReLU: `g_z = (1 + b/r)·g − (b/r)·Re(conj(g)·u)·u`, `g_b = Re(conj(g)·u)`
/// with `u = z/r` on the active set.
pub fn activation_backward(
    act: Activation,
    x: &[C64],
    bias: &[f64],
    len: usize,
    gy: &[C64],
    gx: &mut [C64],
    gbias: &mut [f64],
) {
    match act {
        Activation::ModRelu => {
            for (c, &b) in bias.iter().enumerate() {
                for t in c * len..(c + 1) * len {
                    let r = x[t].norm();
                    if r > 0.0 && r + b > 0.0 {
                        let u = x[t] / r;
                        let proj = (gy[t].conj() * u).re;
                        gx[t] = gy[t] * (1.0 + b / r) - u * (b / r * proj);
                        gbias[c] += proj;
                    } else {
                        gx[t] = ZERO;
                    }
                }
            }
        }
        Activation::CRelu => {
            for ((g, xt), gyt) in gx.iter_mut().zip(x).zip(gy) {
                *g = C64::new(
                    if xt.re > 0.0 { gyt.re } else { 0.0 },
                    if xt.im > 0.0 { gyt.im } else { 0.0 },
                );
            }
        }
    }
}

/// Max-pool by modulus over non-overlapping windows; returns gathered values
/// and the source index of each output.
pub fn maxpool_forward(x: &[C64], channels: usize, len: usize, factor: usize, y: &mut [C64], arg: &mut [usize]) {
    let out_len = len / factor;
    for c in 0..channels {
        for i in 0..out_len {
            let start = c * len + i * factor;
            let mut best = start;
            let mut best_m = x[start].norm_sqr();
            for t in start + 1..start + factor {
                let m = x[t].norm_sqr();
                if m > best_m {
                    best = t;
                    best_m = m;
                }
            }
            y[c * out_len + i] = x[best];
            arg[c * out_len + i] = best;
        }
    }
}

pub fn maxpool_backward(gy: &[C64], arg: &[usize], gx: &mut [C64]) {
    gx.fill(ZERO);
    for (g, &a) in gy.iter().zip(arg) {
        gx[a] += *g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{complex_normal, substream};

    fn rand_vec(n: usize, seed: u64) -> Vec<C64> {
        let mut rng = substream(seed, &[]);
        (0..n).map(|_| complex_normal(&mut rng)).collect()
    }

    #[test]
    fn conv_same_matches_direct_sum() {
        let (c_in, c_out, len, k) = (2, 3, 7, 5);
        let x = rand_vec(c_in * len, 1);
        let w = rand_vec(c_out * c_in * k, 2);
        let b = rand_vec(c_out, 3);
        let mut y = vec![ZERO; c_out * len];
        conv_same_forward(&x, c_in, len, &w, &b, c_out, k, &mut y);
        for o in 0..c_out {
            for t in 0..len {
                let mut s = b[o];
                for c in 0..c_in {
                    for j in 0..k {
                        let src = t as isize + j as isize - 2;
                        if (0..len as isize).contains(&src) {
                            s += w[(o * c_in + c) * k + j] * x[c * len + src as usize];
                        }
                    }
                }
                assert!((y[o * len + t] - s).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_transpose_is_adjoint_of_strided_conv() {
        // ⟨y, T x⟩ = ⟨Tᴴ y, x⟩ with Tᴴ realised by the backward pass.
        let (c_in, c_out, len_in, k, s, p) = (3, 2, 4, 5, 2, 2);
        let len_out = conv_transpose_len(len_in, s, k, p, 1);
        assert_eq!(len_out, 8);
        let x = rand_vec(c_in * len_in, 4);
        let w = rand_vec(c_in * c_out * k, 5);
        let b = vec![ZERO; c_out];
        let g = rand_vec(c_out * len_out, 6);
        let mut y = vec![ZERO; c_out * len_out];
        conv_transpose_forward(&x, c_in, len_in, &w, &b, c_out, k, s, p, len_out, &mut y);
        let lhs: C64 = g.iter().zip(&y).map(|(a, b)| a.conj() * b).sum();
        let mut gx = vec![ZERO; c_in * len_in];
        let mut gw = vec![ZERO; w.len()];
        let mut gb = vec![ZERO; c_out];
        conv_transpose_backward(&x, c_in, len_in, &w, c_out, k, s, p, len_out, &g, &mut gx, &mut gw, &mut gb);
        let rhs: C64 = gx.iter().zip(&x).map(|(a, b)| a.conj() * b).sum();
        assert!((lhs - rhs).norm() < 1e-10);
    }

    #[test]
    fn activations_fix_zero_and_keep_phase() {
        let x = vec![ZERO, C64::new(3.0, -4.0), C64::new(0.1, 0.0)];
        let mut y = vec![ZERO; 3];
        activation_forward(Activation::ModRelu, &x, &[-0.5], 3, &mut y);
        assert_eq!(y[0], ZERO);
        assert!((y[1].arg() - x[1].arg()).abs() < 1e-15);
        assert!((y[1].norm() - 4.5).abs() < 1e-12);
        assert_eq!(y[2], ZERO);
        activation_forward(Activation::CRelu, &x, &[], 3, &mut y);
        assert_eq!(y[0], ZERO);
        assert_eq!(y[1], C64::new(3.0, 0.0));
    }

    #[test]
    fn maxpool_gathers_largest_modulus() {
        let x = vec![C64::new(1.0, 0.0), C64::new(0.0, -2.0), C64::new(0.5, 0.5), C64::new(-0.1, 0.0)];
        let mut y = vec![ZERO; 2];
        let mut arg = vec![0; 2];
        maxpool_forward(&x, 1, 4, 2, &mut y, &mut arg);
        assert_eq!(y, vec![C64::new(0.0, -2.0), C64::new(0.5, 0.5)]);
        assert_eq!(arg, vec![1, 2]);
    }

    #[test]
    fn channel_norm_fit_standardizes() {
        let mut rng = substream(7, &[]);
        let maps: Vec<Vec<C64>> = (0..500)
            .map(|_| {
                (0..6)
                    .map(|i| complex_normal(&mut rng) * (1.0 + i as f64) + C64::new(2.0, -1.0))
                    .collect()
            })
            .collect();
        let norm = ChannelNorm::fit(maps.iter().map(|m| m.as_slice()), 2, 3);
        let mut out = vec![ZERO; 6];
        let mut sq = [0.0; 2];
        for m in &maps {
            norm.forward(m, 3, &mut out);
            for c in 0..2 {
                sq[c] += out[c * 3..(c + 1) * 3].iter().map(|v| v.norm_sqr()).sum::<f64>();
            }
        }
        for s in sq {
            assert!((s / 1500.0 - 1.0).abs() < 1e-10);
        }
    }
}
