//! Complex baseband primitives: root-raised-cosine taps (with fractional
//! time shift), upsampling, pulse shaping, carrier rotation and AWGN.
//!
//! Time is measured in sample periods throughout; one symbol lasts `gamma`
//! samples.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Distance (in samples) from a removable singularity inside which the
/// analytic limit is used.
const SINGULARITY_GUARD: f64 = 1e-8;

/// Sampled, unit-energy root-raised-cosine filter.
#[derive(Debug, Clone, PartialEq)]
pub struct RrcFilter {
    pub taps: Vec<f64>,
    pub gamma: usize,
    pub alpha: f64,
    /// Time shift of the pulse in sample periods (positive delays it).
    pub tau_off: f64,
}

impl RrcFilter {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum()
    }
}

/// Continuous RRC impulse response at time `t` (samples), unnormalized.
///
/// Uses the textbook closed form with symbol period `gamma`; the points
/// `t = 0` and `|t| = gamma / (4 alpha)` are replaced by their limits.
pub fn rrc_impulse(t: f64, gamma: f64, alpha: f64) -> f64 {
    let x = t / gamma;
    if t.abs() < SINGULARITY_GUARD {
        return 1.0 - alpha + 4.0 * alpha / PI;
    }
    let t_sing = gamma / (4.0 * alpha);
    if (t.abs() - t_sing).abs() < SINGULARITY_GUARD {
        let arg = PI / (4.0 * alpha);
        return alpha * FRAC_1_SQRT_2 * ((1.0 + 2.0 / PI) * arg.sin() + (1.0 - 2.0 / PI) * arg.cos());
    }
    let num = (PI * x * (1.0 - alpha)).sin() + 4.0 * alpha * x * (PI * x * (1.0 + alpha)).cos();
    let den = PI * x * (1.0 - (4.0 * alpha * x).powi(2));
    num / den
}

/// Designs an `len`-tap RRC filter sampled at `(i - (len-1)/2 - tau_off)`.
pub fn rrc_taps(gamma: usize, alpha: f64, len: usize, tau_off: f64) -> Result<RrcFilter> {
    if gamma == 0 {
        return Err(Error::invalid("samples per symbol must be at least 1"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("roll-off {alpha} outside (0, 1]")));
    }
    if len % 2 == 0 {
        return Err(Error::invalid(format!("filter length {len} must be odd")));
    }
    if !tau_off.is_finite() {
        return Err(Error::invalid("non-finite time offset"));
    }
    let center = (len - 1) as f64 / 2.0;
    let mut taps: Vec<f64> = (0..len)
        .map(|i| rrc_impulse(i as f64 - center - tau_off, gamma as f64, alpha))
        .collect();
    let norm = taps.iter().map(|t| t * t).sum::<f64>().sqrt();
    taps.iter_mut().for_each(|t| *t /= norm);
    Ok(RrcFilter { taps, gamma, alpha, tau_off })
}

/// Inserts `gamma - 1` zeros after every sample.
pub fn upsample(x: &[Complex64], gamma: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); x.len() * gamma];
    for (i, &v) in x.iter().enumerate() {
        out[i * gamma] = v;
    }
    out
}

/// Full linear convolution of `x` with the filter taps.
pub fn pulse_shape(x: &[Complex64], filter: &RrcFilter) -> Vec<Complex64> {
    convolve(x, &filter.taps)
}

/// Full linear convolution with real taps; output length `len(x) + len(h) - 1`.
pub fn convolve(x: &[Complex64], h: &[f64]) -> Vec<Complex64> {
    if x.is_empty() || h.is_empty() {
        return Vec::new();
    }
    let mut out = vec![Complex64::new(0.0, 0.0); x.len() + h.len() - 1];
    for (j, &xj) in x.iter().enumerate() {
        if xj.re == 0.0 && xj.im == 0.0 {
            continue;
        }
        for (k, &hk) in h.iter().enumerate() {
            out[j + k] += xj * hk;
        }
    }
    out
}

/// Upsample-then-shape in one pass: `out[k] = Σ_i symbols[i] · taps[k - gamma·i]`.
///
/// Equivalent to `pulse_shape(&upsample(symbols, gamma), filter)`.
pub fn shape_symbols(symbols: &[Complex64], gamma: usize, filter: &RrcFilter) -> Vec<Complex64> {
    if symbols.is_empty() {
        return Vec::new();
    }
    let len = symbols.len() * gamma + filter.len() - 1;
    let mut out = vec![Complex64::new(0.0, 0.0); len];
    for (i, &s) in symbols.iter().enumerate() {
        let base = i * gamma;
        for (k, &h) in filter.taps.iter().enumerate() {
            out[base + k] += s * h;
        }
    }
    out
}

/// Adjoint of [`shape_symbols`]: maps a gradient on the shaped samples back
/// to the `n_symbols` input symbols.
pub fn shape_symbols_adjoint(grad: &[Complex64], gamma: usize, filter: &RrcFilter, n_symbols: usize) -> Vec<Complex64> {
    (0..n_symbols)
        .map(|i| {
            let base = i * gamma;
            filter
                .taps
                .iter()
                .enumerate()
                .filter_map(|(k, &h)| grad.get(base + k).map(|g| g * h))
                .sum()
        })
        .collect()
}

/// Rotates sample `k` by `k·delta_phi + phi_off` radians.
///
/// `delta_phi` is the per-sample phase increment (`2π f_cfo / f_s`).
pub fn apply_cfo(x: &[Complex64], delta_phi: f64, phi_off: f64) -> Vec<Complex64> {
    x.iter()
        .enumerate()
        .map(|(k, &v)| v * Complex64::from_polar(1.0, k as f64 * delta_phi + phi_off))
        .collect()
}

/// Adds circularly-symmetric complex Gaussian noise of variance `sigma2`
/// per complex sample.
pub fn awgn<R: Rng + ?Sized>(x: &[Complex64], sigma2: f64, rng: &mut R) -> Vec<Complex64> {
    let mut out = x.to_vec();
    add_awgn(&mut out, sigma2, rng);
    out
}

pub fn add_awgn<R: Rng + ?Sized>(x: &mut [Complex64], sigma2: f64, rng: &mut R) {
    assert!(sigma2 >= 0.0, "noise variance must be non-negative");
    if sigma2 == 0.0 {
        return;
    }
    let sd = (sigma2 / 2.0).sqrt();
    for v in x.iter_mut() {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        *v += Complex64::new(re * sd, im * sd);
    }
}

pub fn energy(x: &[Complex64]) -> f64 {
    x.iter().map(|v| v.norm_sqr()).sum()
}
