//! Differential QPSK reference modem and its AWGN bit-error oracle.
//!
//! Gray mapping of dibits `(b0, b1)` to phase increments:
//! `00 → π/4`, `01 → 3π/4`, `11 → −3π/4`, `10 → −π/4`, i.e. the increment
//! is the angle of `(1 − 2·b1) + j(1 − 2·b0)`. A unit reference symbol
//! precedes the data.

use num_complex::Complex64;
use statrs::function::gamma::ln_gamma;

use crate::dsp::{self, RrcFilter};
use crate::error::{Error, Result};
use crate::params::SystemParams;

#[derive(Debug, Clone, PartialEq)]
pub struct DqpskConfig {
    pub gamma: usize,
    pub alpha: f64,
    pub filter_len: usize,
    /// Bits per block for BLER accounting.
    pub block_bits: usize,
    /// Fractional timing phases per sample in the timing search.
    pub timing_phases: usize,
    /// Symbols per timing re-estimation window when tracking.
    pub track_symbols: usize,
}

impl DqpskConfig {
    pub fn new(p: &SystemParams) -> Self {
        DqpskConfig {
            gamma: p.gamma,
            alpha: p.alpha,
            filter_len: p.filter_len,
            block_bits: p.bits(),
            timing_phases: 8,
            track_symbols: p.frame_len() / p.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        dsp::rrc_taps(self.gamma, self.alpha, self.filter_len, 0.0)?;
        if self.block_bits == 0 || self.block_bits % 2 != 0 {
            return Err(Error::Config("DQPSK block size must be a positive even bit count".into()));
        }
        if self.timing_phases == 0 || self.track_symbols == 0 {
            return Err(Error::Config("timing phases and tracking window must be positive".into()));
        }
        Ok(())
    }

    /// Sample index of the reference symbol's pulse peak in an unpadded
    /// modulated stream.
    pub fn first_peak(&self) -> usize {
        (self.filter_len - 1) / 2
    }
}

impl Default for DqpskConfig {
    fn default() -> Self {
        DqpskConfig::new(&SystemParams::default())
    }
}

/// Unit-magnitude phase increment for one dibit.
pub fn gray_increment(b0: u8, b1: u8) -> Complex64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    Complex64::new(s * (1.0 - 2.0 * b1 as f64), s * (1.0 - 2.0 * b0 as f64))
}

/// Nearest increment's dibit.
pub fn gray_demap(z: Complex64) -> (u8, u8) {
    ((z.im < 0.0) as u8, (z.re < 0.0) as u8)
}

fn check_bits(bits: &[u8]) -> Result<()> {
    if bits.len() % 2 != 0 {
        return Err(Error::invalid(format!("DQPSK needs an even number of bits, got {}", bits.len())));
    }
    if bits.iter().any(|&b| b > 1) {
        return Err(Error::invalid("bits must be 0 or 1"));
    }
    Ok(())
}

/// Reference symbol followed by one differentially encoded symbol per dibit.
pub fn dqpsk_symbols(bits: &[u8]) -> Result<Vec<Complex64>> {
    check_bits(bits)?;
    let mut out = Vec::with_capacity(bits.len() / 2 + 1);
    let mut s = Complex64::new(1.0, 0.0);
    out.push(s);
    for d in bits.chunks_exact(2) {
        s *= gray_increment(d[0], d[1]);
        // Keep the magnitude exactly one despite rounding drift.
        s /= s.norm();
        out.push(s);
    }
    Ok(out)
}

/// Differential detection of consecutive symbol estimates.
pub fn differential_detect(symbols: &[Complex64]) -> Vec<u8> {
    symbols
        .windows(2)
        .flat_map(|w| {
            let (b0, b1) = gray_demap(w[1] * w[0].conj());
            [b0, b1]
        })
        .collect()
}

/// Pulse-shaped DQPSK waveform, `γ` samples per symbol.
pub fn dqpsk_mod(bits: &[u8], cfg: &DqpskConfig) -> Result<Vec<Complex64>> {
    let filter = dsp::rrc_taps(cfg.gamma, cfg.alpha, cfg.filter_len, 0.0)?;
    Ok(dsp::shape_symbols(&dqpsk_symbols(bits)?, cfg.gamma, &filter))
}

/// Matched filter evaluated at fractional sample positions.
#[derive(Debug, Clone)]
struct MatchedFilter {
    bank: Vec<RrcFilter>,
    half: usize,
}

impl MatchedFilter {
    fn new(cfg: &DqpskConfig) -> Result<Self> {
        let bank = (0..cfg.timing_phases)
            .map(|q| dsp::rrc_taps(cfg.gamma, cfg.alpha, cfg.filter_len, q as f64 / cfg.timing_phases as f64))
            .collect::<Result<Vec<_>>>()?;
        Ok(MatchedFilter { bank, half: (cfg.filter_len - 1) / 2 })
    }

    /// Matched-filter output at position `t`, rounded to the nearest phase.
    fn sample(&self, r: &[Complex64], t: f64) -> Complex64 {
        let p = self.bank.len() as f64;
        let q = (t * p).round();
        let base = (q / p).floor();
        let phase = (q - base * p) as usize;
        let taps = &self.bank[phase].taps;
        let start = base as i64 - self.half as i64;
        let mut acc = Complex64::new(0.0, 0.0);
        for (i, &h) in taps.iter().enumerate() {
            let m = start + i as i64;
            if m >= 0 && (m as usize) < r.len() {
                acc += r[m as usize] * h;
            }
        }
        acc
    }

    fn energy(&self, r: &[Complex64], t0: f64, step: f64, count: usize) -> f64 {
        (0..count).map(|k| self.sample(r, t0 + step * k as f64).norm_sqr()).sum::<f64>() / count.max(1) as f64
    }
}

/// How the receiver finds symbol centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Timing {
    /// Reference symbol peak at this sample position; no search.
    Genie(f64),
    /// Energy search within half a symbol of this nominal position, then
    /// re-estimated every tracking window.
    Search(f64),
}

/// Demodulates `n_bits` bits. `samples` must contain every symbol's
/// matched-filter support around the chosen timing.
pub fn dqpsk_demod(samples: &[Complex64], n_bits: usize, cfg: &DqpskConfig, timing: Timing) -> Result<Vec<u8>> {
    cfg.validate()?;
    if n_bits % 2 != 0 {
        return Err(Error::invalid("DQPSK carries an even number of bits"));
    }
    let n_sym = n_bits / 2 + 1;
    let g = cfg.gamma as f64;
    let nominal = match timing {
        Timing::Genie(t) | Timing::Search(t) => t,
    };
    let needed = (nominal + g * (n_sym - 1) as f64).ceil() as usize + 1;
    if samples.len() < needed {
        return Err(Error::Length { expected: needed, got: samples.len() });
    }
    let mf = MatchedFilter::new(cfg)?;
    let mut symbols = Vec::with_capacity(n_sym);
    match timing {
        Timing::Genie(t0) => symbols.extend((0..n_sym).map(|k| mf.sample(samples, t0 + g * k as f64))),
        Timing::Search(t0) => {
            let steps = cfg.gamma * cfg.timing_phases;
            let mut t = t0;
            let mut k = 0;
            while k < n_sym {
                let count = cfg.track_symbols.min(n_sym - k);
                let best = (0..steps)
                    .map(|c| t - g / 2.0 + c as f64 / cfg.timing_phases as f64)
                    .map(|cand| (cand, mf.energy(samples, cand, g, count)))
                    .fold((t, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
                    .0;
                symbols.extend((0..count).map(|j| mf.sample(samples, best + g * j as f64)));
                t = best + g * count as f64;
                k += count;
            }
        }
    }
    Ok(differential_detect(&symbols))
}

/// `e^{-x} I_k(x)` by its power series, summed in log space.
fn scaled_bessel_i(k: u32, x: f64) -> f64 {
    if x == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    let lx = (x / 2.0).ln();
    let mut sum = 0.0;
    let mut m = 0u32;
    loop {
        let mf = m as f64;
        let term = ((2.0 * mf + k as f64) * lx - ln_gamma(mf + 1.0) - ln_gamma(mf + k as f64 + 1.0) - x).exp();
        sum += term;
        if mf > x / 2.0 && term < 1e-17 * sum {
            break;
        }
        m += 1;
    }
    sum
}

/// Bit error probability of Gray-coded DQPSK with differential detection on
/// AWGN: `Q₁(a, b) − ½·I₀(ab)·e^{−(a²+b²)/2}` with
/// `a, b = √(2γ_b(1 ∓ 1/√2))`.
pub fn dqpsk_theoretical_ber(eb_n0_db: f64) -> f64 {
    let gb = 10f64.powf(eb_n0_db / 10.0);
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let a = (2.0 * gb * (1.0 - r)).sqrt();
    let b = (2.0 * gb * (1.0 + r)).sqrt();
    let x = a * b;
    // Q₁(a,b) = e^{−(a²+b²)/2} Σ_k (a/b)^k I_k(ab); the k = 0 term cancels
    // half of the subtracted I₀.
    let pref = (-(b - a).powi(2) / 2.0).exp();
    let ratio = a / b;
    let mut sum = 0.5 * scaled_bessel_i(0, x);
    let mut rk = 1.0;
    for k in 1..200 {
        rk *= ratio;
        let t = rk * scaled_bessel_i(k, x);
        sum += t;
        if t < 1e-18 * sum {
            break;
        }
    }
    (pref * sum).clamp(0.0, 0.5)
}

/// Probability that a `k`-bit block has at least one error when bit errors
/// are independent with probability `p`.
pub fn ber_to_bler(p: f64, k: usize) -> f64 {
    -(k as f64 * (-p).ln_1p()).exp_m1()
}
