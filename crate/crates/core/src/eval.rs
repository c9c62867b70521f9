//! Monte-Carlo block-error-rate evaluation and CSV export.

use std::fmt::Write as _;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Beta, ContinuousCDF};

use crate::baseline::{dqpsk_demod, dqpsk_mod, DqpskConfig, Timing};
use crate::channel::{
    draw_channel, drifting_stream, eb_n0_to_sigma2, stochastic_channel_with_noise, ChannelDraw, DriftingChannelConfig,
    DriftingChannelState, StochasticChannelConfig,
};
use crate::dsp;
use crate::error::{Error, Result};
use crate::framesync::{align_decoded, decode_stream, StreamConfig};
use crate::nets::{argmax, Message, Model};
use crate::params::SystemParams;
use crate::training::{sequence_windows, tx_stream};

/// Two-sided confidence level of reported intervals.
pub const CONFIDENCE: f64 = 0.95;
/// Below this many errors the exact Clopper–Pearson interval is used.
pub const EXACT_CI_ERRORS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum System {
    Autoencoder,
    Dqpsk,
}

impl std::fmt::Display for System {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            System::Autoencoder => "autoencoder",
            System::Dqpsk => "dqpsk",
        })
    }
}

impl std::str::FromStr for System {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "autoencoder" => Ok(System::Autoencoder),
            "dqpsk" => Ok(System::Dqpsk),
            _ => Err(Error::Config(format!("unknown system {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelKind {
    Stochastic,
    Drifting,
}

impl std::fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ChannelKind::Stochastic => "stochastic",
            ChannelKind::Drifting => "drifting",
        })
    }
}

impl std::str::FromStr for ChannelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(ChannelKind::Stochastic),
            "drifting" => Ok(ChannelKind::Drifting),
            _ => Err(Error::Config(format!("unknown channel {s:?}"))),
        }
    }
}

/// One point of a BLER curve.
#[derive(Debug, Clone, PartialEq)]
pub struct BlerPoint {
    pub eb_n0_db: f64,
    pub trials: usize,
    pub errors: usize,
    pub bler: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

impl BlerPoint {
    pub fn new(eb_n0_db: f64, trials: usize, errors: usize) -> Self {
        let (ci_lo, ci_hi) = confidence_interval(errors, trials);
        let bler = if trials == 0 { f64::NAN } else { errors as f64 / trials as f64 };
        BlerPoint { eb_n0_db, trials, errors, bler, ci_lo, ci_hi }
    }

    pub fn half_width(&self) -> f64 {
        (self.ci_hi - self.ci_lo) / 2.0
    }
}

/// Clopper–Pearson interval for `x` successes out of `n`.
pub fn clopper_pearson(x: usize, n: usize, level: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let a = (1.0 - level) / 2.0;
    let lo = if x == 0 { 0.0 } else { Beta::new(x as f64, (n - x + 1) as f64).unwrap().inverse_cdf(a) };
    let hi = if x == n { 1.0 } else { Beta::new((x + 1) as f64, (n - x) as f64).unwrap().inverse_cdf(1.0 - a) };
    (lo, hi)
}

/// Normal approximation above [`EXACT_CI_ERRORS`] errors, exact otherwise.
pub fn confidence_interval(errors: usize, trials: usize) -> (f64, f64) {
    if errors < EXACT_CI_ERRORS || trials == 0 {
        return clopper_pearson(errors, trials, CONFIDENCE);
    }
    let p = errors as f64 / trials as f64;
    let z = 1.959_963_984_540_054;
    let h = z * (p * (1.0 - p) / trials as f64).sqrt();
    ((p - h).max(0.0), (p + h).min(1.0))
}

/// Stop once either bound is reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopRule {
    pub min_errors: usize,
    pub max_trials: usize,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule { min_errors: 200, max_trials: 100_000 }
    }
}

impl StopRule {
    fn done(&self, trials: usize, errors: usize) -> bool {
        errors >= self.min_errors || trials >= self.max_trials
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub params: SystemParams,
    /// Eb/N0 is overwritten per point.
    pub stochastic: StochasticChannelConfig,
    pub drift: DriftingChannelConfig,
    pub dqpsk: DqpskConfig,
    pub stream: StreamConfig,
    pub frames_per_stream: usize,
    /// Zero samples ahead of each drifting-channel stream.
    pub lead: usize,
    pub stop: StopRule,
    pub seed: u64,
    /// Sequences per decoder call on the stochastic channel.
    pub batch_rows: usize,
    /// DQPSK blocks per stochastic-channel draw.
    pub dqpsk_blocks_per_draw: usize,
}

impl EvalConfig {
    pub fn new(params: SystemParams, seed: u64) -> Self {
        let stochastic = StochasticChannelConfig {
            gamma: params.gamma,
            alpha: params.alpha,
            filter_len: params.filter_len,
            rate: params.rate(),
            input_symbols: params.seq_symbols(),
            ..Default::default()
        };
        EvalConfig {
            stochastic,
            drift: DriftingChannelConfig::default(),
            dqpsk: DqpskConfig::new(&params),
            stream: StreamConfig::new(&params),
            frames_per_stream: 20,
            lead: 9,
            stop: StopRule::default(),
            seed,
            batch_rows: 1000,
            dqpsk_blocks_per_draw: params.seq_messages(),
            params,
        }
    }
}

fn point_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Center-message BLER of the autoencoder on the stochastic channel.
fn ae_stochastic(model: &Model, cfg: &EvalConfig, eb: f64, rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
    let p = &cfg.params;
    let ch = StochasticChannelConfig { eb_n0_db: eb, ..cfg.stochastic.clone() };
    let table = model.tx.table()?;
    let sigma2 = ch.sigma2() * table.average_energy();
    let seqm = p.seq_messages();
    let (mut trials, mut errors) = (0, 0);
    while !cfg.stop.done(trials, errors) {
        let rows = cfg.batch_rows.min(cfg.stop.max_trials - trials);
        let msgs: Vec<usize> = (0..rows * seqm).map(|_| rng.random_range(0..p.messages)).collect();
        let draws: Vec<ChannelDraw> = (0..rows).map(|_| draw_channel(&ch, rng)).collect();
        let w = sequence_windows(&table, &msgs, &draws, p, &ch, sigma2)?;
        let probs = model.sd.infer(&w)?;
        for r in 0..rows {
            if argmax(probs.row(r)) != msgs[r * seqm + p.ell] {
                errors += 1;
            }
        }
        trials += rows;
    }
    Ok((trials, errors))
}

/// Random bits of `blocks` blocks and their block-error count after demod.
fn block_errors(tx: &[u8], rx: &[u8], block_bits: usize) -> usize {
    tx.chunks(block_bits).zip(rx.chunks(block_bits)).filter(|(a, b)| a != b).count()
}

fn random_bits(n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..n).map(|_| rng.random_range(0..2u8)).collect()
}

fn dqpsk_stochastic(cfg: &EvalConfig, eb: f64, rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
    let d = &cfg.dqpsk;
    let blocks = cfg.dqpsk_blocks_per_draw;
    let n_bits = blocks * d.block_bits;
    let ch = StochasticChannelConfig { eb_n0_db: eb, input_symbols: n_bits / 2 + 1, ..cfg.stochastic.clone() };
    ch.validate()?;
    let sigma2 = ch.sigma2();
    let (mut trials, mut errors) = (0, 0);
    while !cfg.stop.done(trials, errors) {
        let bits = random_bits(n_bits, rng);
        let draw = draw_channel(&ch, rng);
        let y = stochastic_channel_with_noise(&crate::baseline::dqpsk_symbols(&bits)?, &ch, &draw, sigma2)?;
        let rx = dqpsk_demod(&y, n_bits, d, Timing::Search(d.first_peak() as f64))?;
        errors += block_errors(&bits, &rx, d.block_bits);
        trials += blocks;
    }
    Ok((trials, errors))
}

fn ae_drifting(model: &Model, cfg: &EvalConfig, eb: f64, rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
    let p = &cfg.params;
    let table = model.tx.table()?;
    let sigma2 = eb_n0_to_sigma2(eb, p.rate()) * table.average_energy();
    let (mut trials, mut errors) = (0, 0);
    while !cfg.stop.done(trials, errors) {
        let (messages, samples) = ae_drift_stream(&table, cfg, sigma2, rng)?;
        let dec = decode_stream(&samples, model, &cfg.stream)?;
        match align_decoded(&dec, &messages, p, 4 * p.frame_messages, 0.5) {
            Some(al) => {
                trials += al.compared;
                errors += al.errors;
            }
            None => {
                // Lost synchronization: every message of the stream is lost.
                let n = messages.len() - (p.ell - 1);
                trials += n;
                errors += n;
            }
        }
    }
    Ok((trials, errors))
}

/// Random message log and its drifting-channel reception.
pub fn ae_drift_stream(
    table: &crate::nets::TxTable,
    cfg: &EvalConfig,
    sigma2: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Message>, Vec<Complex64>)> {
    let p = &cfg.params;
    let messages: Vec<Message> = (0..cfg.frames_per_stream * p.frame_messages)
        .map(|_| Message::from_index(rng.random_range(0..p.messages)))
        .collect();
    let tail = p.frame_len();
    let tx = tx_stream(table, &messages, p, cfg.lead, tail)?;
    let mut state = DriftingChannelState::new(cfg.drift.clone(), rng);
    Ok((messages, drifting_stream(&tx, &mut state, sigma2, rng).samples))
}

fn dqpsk_drifting(cfg: &EvalConfig, eb: f64, rng: &mut ChaCha8Rng) -> Result<(usize, usize)> {
    let d = &cfg.dqpsk;
    let p = &cfg.params;
    let blocks = cfg.frames_per_stream * p.frame_messages;
    let n_bits = blocks * d.block_bits;
    let sigma2 = eb_n0_to_sigma2(eb, p.rate());
    let (mut trials, mut errors) = (0, 0);
    while !cfg.stop.done(trials, errors) {
        let bits = random_bits(n_bits, rng);
        let mut tx = vec![Complex64::new(0.0, 0.0); cfg.lead];
        tx.extend(dqpsk_mod(&bits, d)?);
        tx.extend(std::iter::repeat_n(Complex64::new(0.0, 0.0), 4 * d.filter_len));
        let mut state = DriftingChannelState::new(cfg.drift.clone(), rng);
        let y = drifting_stream(&tx, &mut state, sigma2, rng).samples;
        let rx = dqpsk_demod(&y, n_bits, d, Timing::Search((cfg.lead + d.first_peak()) as f64))?;
        errors += block_errors(&bits, &rx, d.block_bits);
        trials += blocks;
    }
    Ok((trials, errors))
}

/// BLER curve over `grid`. Each point draws from its own rng stream, so
/// results do not depend on evaluation order and two models evaluated with
/// the same seed see identical channel realizations.
pub fn evaluate_bler(
    system: System,
    channel: ChannelKind,
    model: Option<&Model>,
    grid: &[f64],
    cfg: &EvalConfig,
) -> Result<Vec<BlerPoint>> {
    let need_model = || model.ok_or_else(|| Error::invalid("autoencoder evaluation needs a model"));
    grid.iter()
        .enumerate()
        .map(|(i, &eb)| {
            let mut rng = point_rng(cfg.seed, i);
            let (trials, errors) = match (system, channel) {
                (System::Autoencoder, ChannelKind::Stochastic) => ae_stochastic(need_model()?, cfg, eb, &mut rng)?,
                (System::Autoencoder, ChannelKind::Drifting) => ae_drifting(need_model()?, cfg, eb, &mut rng)?,
                (System::Dqpsk, ChannelKind::Stochastic) => dqpsk_stochastic(cfg, eb, &mut rng)?,
                (System::Dqpsk, ChannelKind::Drifting) => dqpsk_drifting(cfg, eb, &mut rng)?,
            };
            log::info!("{system}/{channel} {eb:5.1} dB: {errors}/{trials}");
            Ok(BlerPoint::new(eb, trials, errors))
        })
        .collect()
}

/// Bit errors of genie-timed DQPSK on pure AWGN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BerEstimate {
    pub bits: usize,
    pub errors: usize,
    pub ber: f64,
    /// Standard error from batch means, which accounts for the correlation
    /// of errors within a symbol pair.
    pub std_err: f64,
}

pub fn dqpsk_awgn_ber(cfg: &DqpskConfig, eb_n0_db: f64, batches: usize, bits_per_batch: usize, seed: u64) -> Result<BerEstimate> {
    if batches < 2 || bits_per_batch % 2 != 0 {
        return Err(Error::invalid("need at least two batches of an even number of bits"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma2 = eb_n0_to_sigma2(eb_n0_db, 2.0);
    let t0 = cfg.first_peak() as f64;
    let mut rates = Vec::with_capacity(batches);
    let mut errors = 0;
    for _ in 0..batches {
        let bits = random_bits(bits_per_batch, &mut rng);
        let mut y = dqpsk_mod(&bits, cfg)?;
        dsp::add_awgn(&mut y, sigma2, &mut rng);
        let rx = dqpsk_demod(&y, bits.len(), cfg, Timing::Genie(t0))?;
        let e = bits.iter().zip(&rx).filter(|(a, b)| a != b).count();
        errors += e;
        rates.push(e as f64 / bits_per_batch as f64);
    }
    let mean = rates.iter().sum::<f64>() / batches as f64;
    let var = rates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
    Ok(BerEstimate { bits: batches * bits_per_batch, errors, ber: mean, std_err: (var / batches as f64).sqrt() })
}

/// Eb/N0 at which a curve crosses `target`, interpolating log10(BLER)
/// linearly between the bracketing points.
pub fn required_eb_n0(points: &[BlerPoint], target: f64) -> Option<f64> {
    let mut pts: Vec<&BlerPoint> = points.iter().filter(|p| p.trials > 0).collect();
    pts.sort_by(|a, b| a.eb_n0_db.total_cmp(&b.eb_n0_db));
    let floor = |p: &BlerPoint| p.bler.max(0.5 / p.trials as f64).log10();
    let t = target.log10();
    for w in pts.windows(2) {
        let (a, b) = (floor(w[0]), floor(w[1]));
        if a >= t && b <= t {
            if a == b {
                return Some(w[0].eb_n0_db);
            }
            return Some(w[0].eb_n0_db + (a - t) / (a - b) * (w[1].eb_n0_db - w[0].eb_n0_db));
        }
    }
    pts.first().filter(|p| floor(p) <= t).map(|p| p.eb_n0_db)
}

/// `# key = value` preamble lines for CSV artifacts.
pub fn csv_preamble(config_hash: &str, seed: u64) -> String {
    format!("# config_hash = {config_hash}\n# seed = {seed}\n")
}

pub fn bler_csv(curves: &[(System, ChannelKind, &[BlerPoint])], config_hash: &str, seed: u64) -> String {
    let mut s = csv_preamble(config_hash, seed);
    s.push_str("system,channel,eb_n0_db,trials,errors,bler,ci_lo,ci_hi\n");
    for (system, channel, pts) in curves {
        for p in pts.iter() {
            writeln!(
                s,
                "{system},{channel},{},{},{},{:.6e},{:.6e},{:.6e}",
                p.eb_n0_db, p.trials, p.errors, p.bler, p.ci_lo, p.ci_hi
            )
            .unwrap();
        }
    }
    s
}

/// Wide table with one `bler,ci_lo,ci_hi` column group per named curve,
/// joined on Eb/N0. Curves must share the grid.
pub fn compare_csv(curves: &[(&str, &[BlerPoint])], config_hash: &str, seed: u64) -> Result<String> {
    let grid: Vec<f64> = curves.first().map(|c| c.1.iter().map(|p| p.eb_n0_db).collect()).unwrap_or_default();
    if curves.iter().any(|c| c.1.len() != grid.len() || c.1.iter().zip(&grid).any(|(p, g)| p.eb_n0_db != *g)) {
        return Err(Error::invalid("compared curves use different Eb/N0 grids"));
    }
    let mut s = csv_preamble(config_hash, seed);
    s.push_str("eb_n0_db");
    for (name, _) in curves {
        write!(s, ",{name}_bler,{name}_ci_lo,{name}_ci_hi").unwrap();
    }
    s.push('\n');
    for (i, g) in grid.iter().enumerate() {
        write!(s, "{g}").unwrap();
        for (_, pts) in curves {
            let p = &pts[i];
            write!(s, ",{:.6e},{:.6e},{:.6e}", p.bler, p.ci_lo, p.ci_hi).unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn constellation_csv(points: &[(u32, usize, f64, f64)], config_hash: &str, seed: u64) -> String {
    let mut s = csv_preamble(config_hash, seed);
    s.push_str("message,symbol_index,re,im\n");
    for (m, k, re, im) in points {
        writeln!(s, "{m},{k},{re:.9},{im:.9}").unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::{ber_to_bler, dqpsk_theoretical_ber};
    use rand_distr::{Binomial, Distribution};

    #[test]
    fn clopper_pearson_edges_and_symmetry() {
        let (lo, hi) = clopper_pearson(0, 100, 0.95);
        assert_eq!(lo, 0.0);
        // Zero successes: upper bound solves (1-p)^n = 0.025.
        assert!((hi - (1.0 - 0.025f64.powf(1.0 / 100.0))).abs() < 1e-9);
        let (a, b) = clopper_pearson(7, 50, 0.95);
        let (c, d) = clopper_pearson(43, 50, 0.95);
        assert!((a - (1.0 - d)).abs() < 1e-9 && (b - (1.0 - c)).abs() < 1e-9);
        assert!(a < 7.0 / 50.0 && b > 7.0 / 50.0);
    }

    #[test]
    fn interval_switches_to_normal_approximation() {
        let p = BlerPoint::new(6.0, 10_000, 250);
        assert_eq!(p.bler, 0.025);
        let h = 1.959963984540054 * (0.025f64 * 0.975 / 10_000.0).sqrt();
        assert!((p.half_width() - h).abs() < 1e-12);
        let q = BlerPoint::new(6.0, 10_000, 50);
        assert_eq!((q.ci_lo, q.ci_hi), clopper_pearson(50, 10_000, 0.95));
    }

    #[test]
    fn interval_coverage() {
        // A rigged channel that errs with known probability p.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (p, n) in [(0.01, 20_000u64), (0.002, 5_000), (0.2, 1_000)] {
            let dist = Binomial::new(n, p).unwrap();
            let covered = (0..500)
                .filter(|_| {
                    let x = dist.sample(&mut rng) as usize;
                    let pt = BlerPoint::new(0.0, n as usize, x);
                    pt.ci_lo <= p && p <= pt.ci_hi
                })
                .count();
            assert!(covered >= 465, "p={p}: coverage {covered}/500");
        }
    }

    #[test]
    fn required_eb_n0_interpolates_in_log_domain() {
        let pts = vec![BlerPoint::new(4.0, 1000, 100), BlerPoint::new(6.0, 1000, 1), BlerPoint::new(8.0, 1000, 0)];
        let x = required_eb_n0(&pts, 1e-2).unwrap();
        assert!((x - 5.0).abs() < 1e-9);
        assert_eq!(required_eb_n0(&pts[..1], 1e-2), None);
    }

    #[test]
    fn csv_shapes() {
        let pts = vec![BlerPoint::new(2.0, 100, 10), BlerPoint::new(4.0, 100, 1)];
        let s = bler_csv(&[(System::Dqpsk, ChannelKind::Drifting, &pts)], "abc", 7);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "# config_hash = abc");
        assert_eq!(lines[1], "# seed = 7");
        assert_eq!(lines[2], "system,channel,eb_n0_db,trials,errors,bler,ci_lo,ci_hi");
        assert!(lines[3].starts_with("dqpsk,drifting,2,100,10,1.000000e-1,"));
        let c = compare_csv(&[("a", &pts), ("b", &pts)], "abc", 7).unwrap();
        assert!(c.lines().nth(2).unwrap().starts_with("eb_n0_db,a_bler,a_ci_lo,a_ci_hi,b_bler"));
        assert!(compare_csv(&[("a", &pts), ("b", &pts[..1])], "abc", 7).is_err());
    }

    #[test]
    fn dqpsk_awgn_tracks_theory_at_low_snr() {
        let est = dqpsk_awgn_ber(&DqpskConfig::default(), 4.0, 20, 10_000, 3).unwrap();
        let th = dqpsk_theoretical_ber(4.0);
        assert!((est.ber - th).abs() < 4.0 * est.std_err, "measured {} theory {th} se {}", est.ber, est.std_err);
    }

    #[test]
    fn dqpsk_evaluation_is_deterministic_and_sane() {
        let mut cfg = EvalConfig::new(SystemParams::default(), 11);
        cfg.stop = StopRule { min_errors: 50, max_trials: 3000 };
        let a = evaluate_bler(System::Dqpsk, ChannelKind::Stochastic, None, &[4.0, 12.0], &cfg).unwrap();
        let b = evaluate_bler(System::Dqpsk, ChannelKind::Stochastic, None, &[4.0, 12.0], &cfg).unwrap();
        assert_eq!(a, b);
        // Bit errors are correlated within a block, so the independent-error
        // conversion is an upper bound.
        assert!(a[0].bler < ber_to_bler(dqpsk_theoretical_ber(4.0), 8) * 1.3);
        assert!(a[1].bler < a[0].bler);
        assert!(evaluate_bler(System::Autoencoder, ChannelKind::Stochastic, None, &[4.0], &cfg).is_err());
    }
}
