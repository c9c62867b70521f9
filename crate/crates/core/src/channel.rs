//! Channel models.
//!
//! * [`stochastic_channel`]: the stateless training channel. Symbols are
//!   upsampled and shaped with a time-shifted RRC pulse, rotated by a carrier
//!   offset, and disturbed by AWGN. Each call is independent.
//! * [`drifting_stream`]: a stateful evaluation channel whose sampling and
//!   carrier offsets drift as clamped random walks, so samples get inserted
//!   or dropped over long streams.
//!
//! Noise calibration: with unit average symbol energy and unit-energy taps,
//! the matched-filter Es/N0 equals `1/σ²`, hence `σ² = 1 / (R · Eb/N0)`.
//! When the transmitted constellation has average energy `Es ≠ 1` the noise
//! is scaled by `Es` so the stated Eb/N0 stays exact.

use std::f64::consts::TAU;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::dsp::{self, RrcFilter};
use crate::error::{Error, Result};

/// Training-channel parameters. Rates are in radians per sample and time
/// offsets in sample periods.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticChannelConfig {
    pub gamma: usize,
    pub alpha: f64,
    pub filter_len: usize,
    pub tau_bound: f64,
    pub cfo_sigma: f64,
    pub cfo_min: f64,
    pub cfo_max: f64,
    pub eb_n0_db: f64,
    pub rate: f64,
    /// Expected input length in complex symbols.
    pub input_symbols: usize,
}

impl Default for StochasticChannelConfig {
    fn default() -> Self {
        // 1.5 kHz offset bound at 2 MHz sampling.
        let cfo_max = TAU * 1.5e3 / 2e6;
        StochasticChannelConfig {
            gamma: 4,
            alpha: 0.35,
            filter_len: 31,
            tau_bound: 1.0,
            cfo_sigma: cfo_max / 2.0,
            cfo_min: -cfo_max,
            cfo_max,
            eb_n0_db: 9.0,
            rate: 2.0,
            input_symbols: 52,
        }
    }
}

impl StochasticChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_bound >= 0.0) {
            return Err(Error::Config(format!("tau_bound = {} must be >= 0", self.tau_bound)));
        }
        if !(self.cfo_min <= 0.0 && self.cfo_max >= 0.0) {
            return Err(Error::Config("cfo bounds must bracket zero".into()));
        }
        if !(self.cfo_sigma >= 0.0) {
            return Err(Error::Config("cfo_sigma must be >= 0".into()));
        }
        if !(self.rate > 0.0) {
            return Err(Error::Config("rate must be positive".into()));
        }
        if !self.eb_n0_db.is_finite() {
            return Err(Error::Config("eb_n0_db must be finite".into()));
        }
        dsp::rrc_taps(self.gamma, self.alpha, self.filter_len, 0.0).map(|_| ()).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn output_len(&self) -> usize {
        self.input_symbols * self.gamma + self.filter_len - 1
    }

    /// Noise variance for unit symbol energy.
    pub fn sigma2(&self) -> f64 {
        eb_n0_to_sigma2(self.eb_n0_db, self.rate)
    }
}

/// One realization of the training-channel randomness.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelDraw {
    pub tau_off: f64,
    pub delta_phi: f64,
    pub phi_off: f64,
    pub noise_seed: u64,
}

impl ChannelDraw {
    /// Noise-free, offset-free draw.
    pub fn identity() -> Self {
        ChannelDraw { tau_off: 0.0, delta_phi: 0.0, phi_off: 0.0, noise_seed: 0 }
    }
}

pub fn eb_n0_to_sigma2(eb_n0_db: f64, rate: f64) -> f64 {
    1.0 / (rate * 10f64.powf(eb_n0_db / 10.0))
}

/// Inverse of [`eb_n0_to_sigma2`].
pub fn sigma2_to_eb_n0(sigma2: f64, rate: f64) -> f64 {
    10.0 * (1.0 / (rate * sigma2)).log10()
}

pub fn draw_channel<R: Rng + ?Sized>(cfg: &StochasticChannelConfig, rng: &mut R) -> ChannelDraw {
    let tau_off = if cfg.tau_bound > 0.0 { rng.random_range(-cfg.tau_bound..=cfg.tau_bound) } else { 0.0 };
    let delta_phi = truncated_normal(cfg.cfo_sigma, cfg.cfo_min, cfg.cfo_max, rng);
    let phi_off = rng.random_range(0.0..TAU);
    let noise_seed = rng.random();
    ChannelDraw { tau_off, delta_phi, phi_off, noise_seed }
}

/// Zero-mean normal truncated to `[lo, hi]` by rejection.
fn truncated_normal<R: Rng + ?Sized>(sigma: f64, lo: f64, hi: f64, rng: &mut R) -> f64 {
    if sigma == 0.0 || lo == hi {
        return 0.0f64.clamp(lo, hi);
    }
    loop {
        let z: f64 = StandardNormal.sample(rng);
        let v = z * sigma;
        if (lo..=hi).contains(&v) {
            return v;
        }
    }
}

/// Applies the training channel with the noise level implied by the
/// configured Eb/N0 at unit symbol energy.
pub fn stochastic_channel(symbols: &[Complex64], cfg: &StochasticChannelConfig, draw: &ChannelDraw) -> Result<Vec<Complex64>> {
    stochastic_channel_with_noise(symbols, cfg, draw, cfg.sigma2())
}

/// As [`stochastic_channel`] with an explicit per-sample noise variance.
pub fn stochastic_channel_with_noise(
    symbols: &[Complex64],
    cfg: &StochasticChannelConfig,
    draw: &ChannelDraw,
    sigma2: f64,
) -> Result<Vec<Complex64>> {
    if symbols.len() != cfg.input_symbols {
        return Err(Error::Length { expected: cfg.input_symbols, got: symbols.len() });
    }
    let filter = dsp::rrc_taps(cfg.gamma, cfg.alpha, cfg.filter_len, draw.tau_off)?;
    let mut y = shape_and_rotate(symbols, &filter, draw);
    let mut rng = ChaCha8Rng::seed_from_u64(draw.noise_seed);
    dsp::add_awgn(&mut y, sigma2, &mut rng);
    Ok(y)
}

fn shape_and_rotate(symbols: &[Complex64], filter: &RrcFilter, draw: &ChannelDraw) -> Vec<Complex64> {
    let shaped = dsp::shape_symbols(symbols, filter.gamma, filter);
    dsp::apply_cfo(&shaped, draw.delta_phi, draw.phi_off)
}

/// Gradient of a real loss w.r.t. the channel input symbols, given its
/// gradient w.r.t. the output (`∂L/∂Re + j ∂L/∂Im` per sample). Noise is
/// additive and does not enter.
pub fn stochastic_channel_adjoint(
    grad_out: &[Complex64],
    cfg: &StochasticChannelConfig,
    draw: &ChannelDraw,
) -> Result<Vec<Complex64>> {
    if grad_out.len() != cfg.output_len() {
        return Err(Error::Length { expected: cfg.output_len(), got: grad_out.len() });
    }
    let filter = dsp::rrc_taps(cfg.gamma, cfg.alpha, cfg.filter_len, draw.tau_off)?;
    let derotated = dsp::apply_cfo(grad_out, -draw.delta_phi, -draw.phi_off);
    Ok(dsp::shape_symbols_adjoint(&derotated, cfg.gamma, &filter, cfg.input_symbols))
}

/// Drift model for the evaluation channel. Sampling offsets are in samples
/// per sample (1 ppm = 1e-6) and carrier offsets in radians per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftingChannelConfig {
    pub sfo_std: f64,
    pub sfo_max: f64,
    pub cfo_std: f64,
    pub cfo_max: f64,
    /// Initial rates are `init ± spread` (uniform), then clamped.
    pub sfo_init: f64,
    pub sfo_init_spread: f64,
    pub cfo_init: f64,
    pub cfo_init_spread: f64,
    /// Draw the initial carrier phase uniformly instead of starting at 0.
    pub random_phase: bool,
}

impl DriftingChannelConfig {
    /// No drift and no offsets at all.
    pub fn still() -> Self {
        DriftingChannelConfig {
            sfo_std: 0.0,
            sfo_max: 0.0,
            cfo_std: 0.0,
            cfo_max: 0.0,
            sfo_init: 0.0,
            sfo_init_spread: 0.0,
            cfo_init: 0.0,
            cfo_init_spread: 0.0,
            random_phase: false,
        }
    }

    /// Converts oscillator-style figures (Hz and Hz/sample) at `fs` into
    /// per-sample units. Frequency offsets in Hz map to samples per sample
    /// through the sample rate itself.
    pub fn from_hz(
        fs: f64,
        sfo_std_hz: f64,
        sfo_max_hz: f64,
        cfo_std_hz: f64,
        cfo_max_hz: f64,
    ) -> Self {
        DriftingChannelConfig {
            sfo_std: sfo_std_hz / fs,
            sfo_max: sfo_max_hz / fs,
            cfo_std: TAU * cfo_std_hz / fs,
            cfo_max: TAU * cfo_max_hz / fs,
            sfo_init: 0.0,
            sfo_init_spread: sfo_max_hz / fs,
            cfo_init: 0.0,
            cfo_init_spread: TAU * cfo_max_hz / fs,
            random_phase: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.sfo_std,
            self.sfo_max,
            self.cfo_std,
            self.cfo_max,
            self.sfo_init_spread,
            self.cfo_init_spread,
        ];
        if vals.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("drift stdevs, clamps and spreads must be >= 0".into()));
        }
        if self.sfo_init.abs() > self.sfo_max || self.cfo_init.abs() > self.cfo_max {
            return Err(Error::Config("initial drift rate exceeds its clamp".into()));
        }
        if self.sfo_max >= 0.5 {
            return Err(Error::Config("sfo_max must be well below one sample per sample".into()));
        }
        Ok(())
    }
}

impl Default for DriftingChannelConfig {
    fn default() -> Self {
        DriftingChannelConfig::from_hz(2e6, 0.01, 40.0, 11.75, 1e3)
    }
}

/// Mutable state of one drifting-channel instance.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftingChannelState {
    pub config: DriftingChannelConfig,
    /// Current sampling offset (samples per sample).
    pub sfo: f64,
    /// Current carrier offset (rad per sample).
    pub cfo: f64,
    /// Accumulated carrier phase.
    pub phase: f64,
}

impl DriftingChannelState {
    pub fn new<R: Rng + ?Sized>(config: DriftingChannelConfig, rng: &mut R) -> Self {
        let spread = |c: f64, s: f64, max: f64, rng: &mut R| {
            let v = if s > 0.0 { c + rng.random_range(-s..=s) } else { c };
            v.clamp(-max, max)
        };
        let sfo = spread(config.sfo_init, config.sfo_init_spread, config.sfo_max, rng);
        let cfo = spread(config.cfo_init, config.cfo_init_spread, config.cfo_max, rng);
        let phase = if config.random_phase { rng.random_range(0.0..TAU) } else { 0.0 };
        DriftingChannelState { config, sfo, cfo, phase }
    }
}

/// Received stream plus, per output sample, the fractional input position it
/// was interpolated from (ground truth for synchronization tests).
#[derive(Debug, Clone)]
pub struct DriftOutput {
    pub samples: Vec<Complex64>,
    pub positions: Vec<f64>,
}

/// Passes a complete transmit stream through the drifting channel.
///
/// A positive sampling offset means the receiver clock is fast, so more
/// samples come out than went in.
pub fn drifting_stream<R: Rng + ?Sized>(
    tx: &[Complex64],
    state: &mut DriftingChannelState,
    sigma2: f64,
    rng: &mut R,
) -> DriftOutput {
    let cfg = state.config.clone();
    let sfo_walk = Normal::new(0.0, cfg.sfo_std).expect("validated stdev");
    let cfo_walk = Normal::new(0.0, cfg.cfo_std).expect("validated stdev");
    let sd = (sigma2 / 2.0).sqrt();
    let cap = (tx.len() as f64 * (1.0 + 2.0 * cfg.sfo_max)) as usize + 2;
    let mut samples = Vec::with_capacity(cap);
    let mut positions = Vec::with_capacity(cap);
    let last = tx.len() as f64 - 1.0;
    let mut pos = 0.0f64;
    while !tx.is_empty() && pos <= last {
        let i = pos.floor() as usize;
        let frac = pos - i as f64;
        let v = if frac == 0.0 || i + 1 >= tx.len() { tx[i] } else { tx[i] * (1.0 - frac) + tx[i + 1] * frac };
        let mut out = v * Complex64::from_polar(1.0, state.phase);
        if sigma2 > 0.0 {
            let re: f64 = StandardNormal.sample(rng);
            let im: f64 = StandardNormal.sample(rng);
            out += Complex64::new(re * sd, im * sd);
        }
        samples.push(out);
        positions.push(pos);

        state.phase = (state.phase + state.cfo).rem_euclid(TAU);
        pos += 1.0 / (1.0 + state.sfo);
        if cfg.sfo_std > 0.0 {
            state.sfo = (state.sfo + sfo_walk.sample(rng)).clamp(-cfg.sfo_max, cfg.sfo_max);
        }
        if cfg.cfo_std > 0.0 {
            state.cfo = (state.cfo + cfo_walk.sample(rng)).clamp(-cfg.cfo_max, cfg.cfo_max);
        }
    }
    DriftOutput { samples, positions }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn seq_cfg() -> StochasticChannelConfig {
        StochasticChannelConfig::default()
    }

    fn symbols(n: usize, seed: u64) -> Vec<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()
    }

    #[test]
    fn sigma2_values() {
        assert!((eb_n0_to_sigma2(0.0, 2.0) - 0.5).abs() < 1e-15);
        let direct = 1.0 / (2.0 * 10f64.powf(0.9));
        assert!((eb_n0_to_sigma2(9.0, 2.0) - direct).abs() < 1e-15);
        assert!((eb_n0_to_sigma2(9.0, 2.0) - 0.06295).abs() < 5e-6);
        assert!(eb_n0_to_sigma2(3.0, 2.0) > eb_n0_to_sigma2(3.1, 2.0));
        assert!((sigma2_to_eb_n0(eb_n0_to_sigma2(7.3, 2.0), 2.0) - 7.3).abs() < 1e-12);
    }

    #[test]
    fn draws_respect_bounds() {
        let cfg = StochasticChannelConfig { tau_bound: 0.0, ..seq_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut phase_sum = 0.0;
        let n = 100_000;
        for _ in 0..n {
            let d = draw_channel(&cfg, &mut rng);
            assert_eq!(d.tau_off, 0.0);
            assert!(d.delta_phi >= cfg.cfo_min && d.delta_phi <= cfg.cfo_max);
            assert!((0.0..TAU).contains(&d.phi_off));
            phase_sum += d.phi_off;
        }
        let mean = phase_sum / n as f64;
        assert!((mean / std::f64::consts::PI - 1.0).abs() < 0.01, "mean phase {mean}");
    }

    #[test]
    fn tight_truncation_still_terminates() {
        let cfg = StochasticChannelConfig { cfo_sigma: 1.0, cfo_min: -1e-3, cfo_max: 0.0, ..seq_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let d = draw_channel(&cfg, &mut rng);
            assert!((-1e-3..=0.0).contains(&d.delta_phi));
        }
    }

    #[test]
    fn sequence_lengths() {
        let cfg = seq_cfg();
        assert_eq!(cfg.output_len(), 16 * 13 + 30);
        let y = stochastic_channel(&symbols(52, 0), &cfg, &draw_channel(&cfg, &mut ChaCha8Rng::seed_from_u64(0))).unwrap();
        assert_eq!(y.len(), 238);
        assert!(matches!(
            stochastic_channel(&symbols(44, 0), &cfg, &ChannelDraw::identity()),
            Err(Error::Length { expected: 52, got: 44 })
        ));
    }

    #[test]
    fn noiseless_identity_draw_is_pure_shaping() {
        let cfg = seq_cfg();
        let x = symbols(52, 3);
        let y = stochastic_channel_with_noise(&x, &cfg, &ChannelDraw::identity(), 0.0).unwrap();
        let f = dsp::rrc_taps(4, 0.35, 31, 0.0).unwrap();
        assert_eq!(y, dsp::pulse_shape(&dsp::upsample(&x, 4), &f));
        assert!((dsp::energy(&y) / dsp::energy(&x) - 1.0).abs() < 0.05);
        // A single pulse keeps its energy exactly, whatever the offsets.
        let mut one = vec![Complex64::new(0.0, 0.0); 52];
        one[20] = Complex64::new(0.6, -0.8);
        let d = ChannelDraw { tau_off: 0.7, delta_phi: 0.02, phi_off: 1.0, noise_seed: 0 };
        let y = stochastic_channel_with_noise(&one, &cfg, &d, 0.0).unwrap();
        assert!((dsp::energy(&y) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn same_draw_same_output() {
        let cfg = seq_cfg();
        let x = symbols(52, 4);
        let d = draw_channel(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(stochastic_channel(&x, &cfg, &d).unwrap(), stochastic_channel(&x, &cfg, &d).unwrap());
    }

    #[test]
    fn noise_power_matches_calibration() {
        let cfg = StochasticChannelConfig { input_symbols: 250_000, ..seq_cfg() };
        let x = vec![Complex64::new(0.0, 0.0); cfg.input_symbols];
        let y = stochastic_channel(&x, &cfg, &ChannelDraw { noise_seed: 17, ..ChannelDraw::identity() }).unwrap();
        let p = dsp::energy(&y) / y.len() as f64;
        assert!((p / cfg.sigma2() - 1.0).abs() < 0.01, "{p}");
    }

    #[test]
    fn adjoint_matches_forward() {
        let cfg = seq_cfg();
        let d = ChannelDraw { tau_off: 0.37, delta_phi: 0.01, phi_off: 2.0, noise_seed: 0 };
        let x = symbols(52, 5);
        let y = stochastic_channel_with_noise(&x, &cfg, &d, 0.0).unwrap();
        let g: Vec<Complex64> = symbols(cfg.output_len(), 6);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| (a.conj() * b).re).sum();
        let gx = stochastic_channel_adjoint(&g, &cfg, &d).unwrap();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| (a.conj() * b).re).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn still_channel_is_passthrough() {
        let x = symbols(5000, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut st = DriftingChannelState::new(DriftingChannelConfig::still(), &mut rng);
        let out = drifting_stream(&x, &mut st, 0.0, &mut rng);
        assert_eq!(out.samples, x);
        assert!(out.positions.iter().enumerate().all(|(i, &p)| p == i as f64));
    }

    #[test]
    fn constant_sfo_inserts_samples() {
        // 50 ppm fast receiver clock over 10^6 input samples.
        let cfg = DriftingChannelConfig { sfo_max: 50e-6, sfo_init: 50e-6, ..DriftingChannelConfig::still() };
        let x = vec![Complex64::new(1.0, 0.0); 1_000_000];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut st = DriftingChannelState::new(cfg, &mut rng);
        let out = drifting_stream(&x, &mut st, 0.0, &mut rng);
        let extra = out.samples.len() as i64 - x.len() as i64;
        assert!((extra - 50).abs() <= 1, "extra = {extra}");
    }

    #[test]
    fn clamps_hold_over_long_streams() {
        let cfg = DriftingChannelConfig {
            sfo_std: 1e-6,
            sfo_max: 2e-5,
            cfo_std: 1e-4,
            cfo_max: 3e-3,
            ..DriftingChannelConfig::default()
        };
        let x = vec![Complex64::new(0.0, 0.0); 10_000_000];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut st = DriftingChannelState::new(cfg.clone(), &mut rng);
        // Chunked so the clamps are checked along the way, not only at the end.
        for chunk in x.chunks(1_000_000) {
            drifting_stream(chunk, &mut st, 0.0, &mut rng);
            assert!(st.sfo.abs() <= cfg.sfo_max && st.cfo.abs() <= cfg.cfo_max);
        }
    }

    #[test]
    fn default_drift_units() {
        let c = DriftingChannelConfig::default();
        c.validate().unwrap();
        assert!((c.sfo_max - 2e-5).abs() < 1e-15);
        assert!((c.cfo_std - TAU * 11.75 / 2e6).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn noiseless_channel_preserves_energy(seed in 0u64..500, tau in -1.0f64..1.0, phi in 0.0f64..TAU) {
            let cfg = StochasticChannelConfig { input_symbols: 400, ..seq_cfg() };
            let x = symbols(400, seed);
            let d = ChannelDraw { tau_off: tau, delta_phi: 0.003, phi_off: phi, noise_seed: seed };
            let y = stochastic_channel_with_noise(&x, &cfg, &d, 0.0).unwrap();
            // Full convolution keeps every pulse; only the residual symbol-spaced
            // autocorrelation of the truncated taps (below 1e-2) can leak energy.
            prop_assert!((dsp::energy(&y) / dsp::energy(&x) - 1.0).abs() < 0.02);
            // Rotation does not change energy relative to plain shaping.
            let plain = stochastic_channel_with_noise(&x, &cfg, &ChannelDraw { delta_phi: 0.0, phi_off: 0.0, ..d }, 0.0).unwrap();
            prop_assert!((dsp::energy(&y) / dsp::energy(&plain) - 1.0).abs() < 1e-12);
        }
    }
}
