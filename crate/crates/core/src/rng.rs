//! Counter-based random substreams.
//!
//! Every random draw in a Monte Carlo run is keyed by a tuple such as
//! `(domain, trial, range, window)` and derived from one master seed, so results
//! do not depend on evaluation order or worker count.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::C64;

/// Generator type used throughout the crate.
pub type StreamRng = ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a key path into a 64-bit stream identifier.
pub fn derive_seed(master: u64, key: &[u64]) -> u64 {
    let mut h = splitmix64(master ^ 0x5EED_0000_0000_0001);
    for &k in key {
        h = splitmix64(h ^ splitmix64(k.wrapping_add(0xA5A5_A5A5)));
    }
    h
}

/// Independent generator for the given key path.
pub fn substream(master: u64, key: &[u64]) -> StreamRng {
    let a = derive_seed(master, key);
    let mut bytes = [0u8; 32];
    let mut s = a;
    for chunk in bytes.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Standard circular complex Gaussian `CN(0, 1)`.
#[inline]
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> C64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}
