//! Training procedures.
//!
//! * Phase I: TX, PE, FE and RX trained jointly through the stochastic
//!   channel on sequences of `2ℓ+1` messages; only the center message is
//!   scored.
//! * OE training on windows cut from frozen-TX sequences at planted offsets.
//! * Recording of drifting-channel streams with their transmit logs.
//! * Phase II: supervised finetuning of PE/FE/RX on windows sliced from the
//!   recordings at the positions chosen by the offset estimator.

use std::path::Path;

use log::{info, warn};
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channel::{
    draw_channel, drifting_stream, eb_n0_to_sigma2, stochastic_channel_adjoint, stochastic_channel_with_noise,
    ChannelDraw, DriftingChannelConfig, DriftingChannelState, StochasticChannelConfig,
};
use crate::dsp;
use crate::error::{Error, Result};
use crate::framesync::{align_decoded, decode_stream, offset_to_class, StreamConfig};
use crate::io::write_atomic;
use crate::kv;
use crate::nets::{
    marshal_into, oe_specs, slice_seq, unmarshal, Message, Model, PowerMode, SdGrads, SequenceDecoder, Transmitter,
    TxTable,
};
use crate::nn::{
    adam_step, cross_entropy, init_params, softmax_cross_entropy_grad, AdamState, NetParams, Tensor, WeightFile,
};
use crate::params::SystemParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Epoch {
    pub messages: usize,
    pub batch: usize,
}

impl Epoch {
    pub fn steps(&self) -> u64 {
        self.messages.div_ceil(self.batch) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub epochs: Vec<Epoch>,
    pub lr: f64,
}

impl Schedule {
    /// `repeats` epochs of `messages` for each batch size, in order.
    pub fn ramp(messages: usize, batches: &[usize], repeats: usize, lr: f64) -> Self {
        let epochs = batches
            .iter()
            .flat_map(|&batch| std::iter::repeat_n(Epoch { messages, batch }, repeats))
            .collect();
        Schedule { epochs, lr }
    }

    /// Six epochs of 500k messages, one per batch size.
    pub fn desk() -> Self {
        Schedule::ramp(500_000, &[50, 100, 500, 1000, 5000, 10_000], 1, 1e-3)
    }

    /// Sixty epochs of 5M messages, ten per batch size.
    pub fn full() -> Self {
        Schedule::ramp(5_000_000, &[50, 100, 500, 1000, 5000, 10_000], 10, 1e-3)
    }

    /// Default offset-estimator schedule.
    pub fn oe_desk() -> Self {
        Schedule {
            epochs: vec![
                Epoch { messages: 200_000, batch: 100 },
                Epoch { messages: 300_000, batch: 500 },
                Epoch { messages: 500_000, batch: 1000 },
            ],
            lr: 1e-3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs.is_empty() {
            return Err(Error::Config("schedule has no epochs".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        let mut prev = 0;
        for e in &self.epochs {
            if e.batch == 0 || e.messages == 0 {
                return Err(Error::Config("epoch sizes and batch sizes must be positive".into()));
            }
            if e.batch < prev {
                return Err(Error::Config("batch sizes must be non-decreasing".into()));
            }
            prev = e.batch;
        }
        Ok(())
    }

    pub fn total_steps(&self) -> u64 {
        self.epochs.iter().map(Epoch::steps).sum()
    }

    pub fn total_messages(&self) -> usize {
        self.epochs.iter().map(|e| e.messages).sum()
    }

    /// `messages:batch` pairs separated by commas.
    pub fn render(&self) -> String {
        self.epochs.iter().map(|e| format!("{}:{}", e.messages, e.batch)).collect::<Vec<_>>().join(",")
    }

    pub fn parse(epochs: &str, lr: f64) -> Result<Self> {
        let epochs = epochs
            .split(',')
            .map(|item| {
                let (m, b) = item
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("schedule entry {item:?} is not messages:batch")))?;
                let parse = |s: &str| s.trim().replace('_', "").parse::<usize>().map_err(|_| Error::Config(format!("bad number {s:?}")));
                Ok(Epoch { messages: parse(m)?, batch: parse(b)? })
            })
            .collect::<Result<Vec<_>>>()?;
        let s = Schedule { epochs, lr };
        s.validate()?;
        Ok(s)
    }
}

/// Position within a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Cursor {
    pub epoch: usize,
    pub step_in_epoch: u64,
    pub step: u64,
}

impl Cursor {
    fn current(&self, s: &Schedule) -> Option<Epoch> {
        s.epochs.get(self.epoch).copied()
    }

    fn advance(&mut self, s: &Schedule) {
        self.step += 1;
        self.step_in_epoch += 1;
        if self.step_in_epoch >= s.epochs[self.epoch].steps() {
            self.epoch += 1;
            self.step_in_epoch = 0;
        }
    }
}

/// Loss above `10·ln M` for this many consecutive steps aborts training.
pub const DIVERGENCE_STEPS: u64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub cursor: Cursor,
    pub batch: usize,
    pub loss: f64,
}

fn rng_state(rng: &ChaCha8Rng) -> [(String, String); 3] {
    let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    [
        ("rng_seed".into(), seed),
        ("rng_stream".into(), rng.get_stream().to_string()),
        ("rng_word_pos".into(), rng.get_word_pos().to_string()),
    ]
}

fn restore_rng(map: &std::collections::BTreeMap<String, String>) -> Result<ChaCha8Rng> {
    let hex: String = kv::get(map, "rng_seed")?;
    if hex.len() != 64 {
        return Err(Error::Format("rng_seed must be 64 hex digits".into()));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| Error::Format("rng_seed is not hex".into()))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(kv::get(map, "rng_stream")?);
    rng.set_word_pos(kv::get(map, "rng_word_pos")?);
    Ok(rng)
}

fn export_adam(prefix: &str, s: &AdamState, file: &mut WeightFile) {
    for (k, (m, v)) in s.m.iter().zip(&s.v).enumerate() {
        file.insert(format!("adam.{prefix}.m.{k}"), m.clone());
        file.insert(format!("adam.{prefix}.v.{k}"), v.clone());
    }
}

fn import_adam(prefix: &str, net: &NetParams, lr: f64, step: u64, file: &WeightFile) -> Result<AdamState> {
    let mut s = AdamState::new(net, lr);
    s.step = step;
    for k in 0..s.m.len() {
        let fetch = |what: &str| {
            let name = format!("adam.{prefix}.{what}.{k}");
            file.get(&name).cloned().ok_or_else(|| Error::Format(format!("missing tensor {name}")))
        };
        s.m[k] = fetch("m")?;
        s.v[k] = fetch("v")?;
        if s.m[k].shape() != net.tensors().nth(k).unwrap().shape() {
            return Err(Error::Format(format!("adam.{prefix} moment {k} has the wrong shape")));
        }
    }
    Ok(s)
}

/// Sidecar path next to a checkpoint weights file.
pub fn sidecar_path(weights: &Path) -> std::path::PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".meta");
    s.into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase1Config {
    pub params: SystemParams,
    pub channel: StochasticChannelConfig,
    pub schedule: Schedule,
    pub mode: PowerMode,
    pub seed: u64,
    /// Rows per forward/backward pass; larger batches accumulate gradients.
    pub max_chunk: usize,
}

impl Phase1Config {
    pub fn new(params: SystemParams, schedule: Schedule, seed: u64) -> Self {
        let channel = StochasticChannelConfig {
            gamma: params.gamma,
            alpha: params.alpha,
            filter_len: params.filter_len,
            rate: params.rate(),
            input_symbols: params.seq_symbols(),
            ..Default::default()
        };
        Phase1Config { params, channel, schedule, mode: PowerMode::Amplitude, seed, max_chunk: 1000 }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.channel.validate()?;
        self.schedule.validate()?;
        if self.channel.input_symbols != self.params.seq_symbols() {
            return Err(Error::Config("channel input length does not match the training sequence".into()));
        }
        if self.max_chunk == 0 {
            return Err(Error::Config("max_chunk must be positive".into()));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        kv::digest(&format!("phase1 {self:?}"))
    }
}

/// Marshalled receiver windows for rows of `2ℓ+1` messages sent through the
/// stochastic channel with the given draws.
pub fn sequence_windows(
    table: &TxTable,
    msgs: &[usize],
    draws: &[ChannelDraw],
    p: &SystemParams,
    ch: &StochasticChannelConfig,
    sigma2: f64,
) -> Result<Tensor> {
    let seqm = p.seq_messages();
    let rows = draws.len();
    let width = 2 * p.n_seq();
    let mut data = vec![0.0; rows * width];
    for r in 0..rows {
        let sym = table.encode(&msgs[r * seqm..(r + 1) * seqm]);
        let y = stochastic_channel_with_noise(&sym, ch, &draws[r], sigma2)?;
        marshal_into(slice_seq(&y, p)?, &mut data[r * width..(r + 1) * width]);
    }
    Tensor::matrix(rows, width, data)
}

/// Mean center-message cross-entropy of a batch of sequences and its
/// gradients with respect to TX, PE, FE and RX, backpropagated through the
/// channel. `sigma2 = None` scales the noise by the measured constellation
/// energy, treated as a constant.
pub fn phase1_gradients(
    tx: &Transmitter,
    sd: &SequenceDecoder,
    msgs: &[usize],
    draws: &[ChannelDraw],
    ch: &StochasticChannelConfig,
    sigma2: Option<f64>,
    max_chunk: usize,
) -> Result<(f64, crate::nn::Grads, SdGrads)> {
    let p = &sd.params;
    let (seqm, n, m) = (p.seq_messages(), p.symbols_per_message, p.messages);
    let batch = draws.len();
    if batch == 0 || msgs.len() != batch * seqm || max_chunk == 0 {
        return Err(Error::invalid("need one draw and one full message sequence per row"));
    }
    let (table, tx_trace) = tx.table_with_trace()?;
    // Noise follows the constellation energy so the Eb/N0 stays exact.
    let sigma2 = sigma2.unwrap_or_else(|| ch.sigma2() * table.average_energy());
    let mut table_grad = vec![Complex64::new(0.0, 0.0); m * n];
    let mut sd_grads: Option<SdGrads> = None;
    let mut loss_sum = 0.0;
    let win = p.window_range();
    let mut full = vec![Complex64::new(0.0, 0.0); p.channel_len()];

    for lo in (0..batch).step_by(max_chunk) {
        let hi = (lo + max_chunk).min(batch);
        let rows = hi - lo;
        let w = sequence_windows(&table, &msgs[lo * seqm..hi * seqm], &draws[lo..hi], p, ch, sigma2)?;
        let labels: Vec<usize> = (lo..hi).map(|r| msgs[r * seqm + p.ell]).collect();
        let (probs, trace) = sd.forward(&w)?;
        loss_sum += cross_entropy(&probs, &labels)? * rows as f64;
        let mut dl = softmax_cross_entropy_grad(&probs, &labels)?;
        dl.scale(rows as f64 / batch as f64);
        let (g, gw) = sd.backward(&trace, &dl)?;
        match sd_grads.as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => sd_grads = Some(g),
        }
        for r in 0..rows {
            full.iter_mut().for_each(|z| *z = Complex64::new(0.0, 0.0));
            full[win.clone()].copy_from_slice(&unmarshal(gw.row(r)));
            let gsym = stochastic_channel_adjoint(&full, ch, &draws[lo + r])?;
            let seq = &msgs[(lo + r) * seqm..(lo + r + 1) * seqm];
            for (j, &msg) in seq.iter().enumerate() {
                for k in 0..n {
                    table_grad[msg * n + k] += gsym[j * n + k];
                }
            }
        }
    }
    let tx_grads = tx.backward(&table, &tx_trace, &table_grad)?;
    Ok((loss_sum / batch as f64, tx_grads, sd_grads.expect("batch is non-empty")))
}

/// Phase-I trainer with explicit state so it can be checkpointed and
/// resumed bit-exactly.
#[derive(Debug)]
pub struct Phase1Trainer {
    pub cfg: Phase1Config,
    pub tx: Transmitter,
    pub sd: SequenceDecoder,
    adam: [AdamState; 4],
    rng: ChaCha8Rng,
    pub cursor: Cursor,
    above: u64,
}

impl Phase1Trainer {
    pub fn new(cfg: Phase1Config) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let tx = Transmitter::init(&cfg.params, cfg.mode, &mut rng)?;
        let sd = SequenceDecoder::init(&cfg.params, &mut rng)?;
        let lr = cfg.schedule.lr;
        let adam = [
            AdamState::new(&tx.net, lr),
            AdamState::new(&sd.pe, lr),
            AdamState::new(&sd.fe, lr),
            AdamState::new(&sd.rx, lr),
        ];
        Ok(Phase1Trainer { cfg, tx, sd, adam, rng, cursor: Cursor::default(), above: 0 })
    }

    pub fn finished(&self) -> bool {
        self.cursor.epoch >= self.cfg.schedule.epochs.len()
    }

    /// Mean center-message loss of a fresh batch under the current parameters,
    /// without updating anything (uses its own rng).
    pub fn probe_loss(&self, batch: usize, seed: u64) -> Result<f64> {
        let p = &self.cfg.params;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let msgs: Vec<usize> = (0..batch * p.seq_messages()).map(|_| rng.random_range(0..p.messages)).collect();
        let draws: Vec<ChannelDraw> = (0..batch).map(|_| draw_channel(&self.cfg.channel, &mut rng)).collect();
        let table = self.tx.table()?;
        let sigma2 = self.cfg.channel.sigma2() * table.average_energy();
        let w = sequence_windows(&table, &msgs, &draws, p, &self.cfg.channel, sigma2)?;
        let labels: Vec<usize> = (0..batch).map(|r| msgs[r * p.seq_messages() + p.ell]).collect();
        cross_entropy(&self.sd.infer(&w)?, &labels)
    }

    /// One optimizer step; `None` once the schedule is exhausted.
    pub fn step(&mut self) -> Result<Option<StepReport>> {
        let Some(epoch) = self.cursor.current(&self.cfg.schedule) else {
            return Ok(None);
        };
        let p = &self.cfg.params;
        let (seqm, m) = (p.seq_messages(), p.messages);
        let batch = epoch.batch.min(epoch.messages - self.cursor.step_in_epoch as usize * epoch.batch);

        let msgs: Vec<usize> = (0..batch * seqm).map(|_| self.rng.random_range(0..m)).collect();
        let draws: Vec<ChannelDraw> = (0..batch).map(|_| draw_channel(&self.cfg.channel, &mut self.rng)).collect();
        let (loss, tx_grads, g) =
            phase1_gradients(&self.tx, &self.sd, &msgs, &draws, &self.cfg.channel, None, self.cfg.max_chunk)?;
        let [a_tx, a_pe, a_fe, a_rx] = &mut self.adam;
        adam_step(&mut self.tx.net, &tx_grads, a_tx)?;
        adam_step(&mut self.sd.pe, &g.pe, a_pe)?;
        adam_step(&mut self.sd.fe, &g.fe, a_fe)?;
        adam_step(&mut self.sd.rx, &g.rx, a_rx)?;

        let report = StepReport { cursor: self.cursor, batch, loss };
        self.cursor.advance(&self.cfg.schedule);
        let threshold = 10.0 * (m as f64).ln();
        if !loss.is_finite() || loss > threshold {
            self.above += 1;
            if self.above >= DIVERGENCE_STEPS || !loss.is_finite() {
                return Err(Error::Divergence { step: report.cursor.step, loss, threshold });
            }
        } else {
            self.above = 0;
        }
        Ok(Some(report))
    }

    /// Runs to the end of the schedule. Checkpoints every `every` steps (and
    /// on divergence) when a path is given.
    pub fn run(&mut self, checkpoint: Option<(&Path, u64)>, mut progress: impl FnMut(&StepReport)) -> Result<()> {
        loop {
            match self.step() {
                Ok(Some(r)) => {
                    progress(&r);
                    if let Some((path, every)) = checkpoint {
                        if every > 0 && self.cursor.step % every == 0 {
                            self.save_checkpoint(path)?;
                        }
                    }
                }
                Ok(None) => break,
                Err(e @ Error::Divergence { .. }) => {
                    if let Some((path, _)) = checkpoint {
                        self.save_checkpoint(path)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
        }
        if let Some((path, _)) = checkpoint {
            self.save_checkpoint(path)?;
        }
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut file = WeightFile::new();
        self.tx.net.export("tx", &mut file);
        self.sd.pe.export("pe", &mut file);
        self.sd.fe.export("fe", &mut file);
        self.sd.rx.export("rx", &mut file);
        for (name, s) in ["tx", "pe", "fe", "rx"].iter().zip(&self.adam) {
            export_adam(name, s, &mut file);
        }
        file.save(path)?;
        let mut meta = std::collections::BTreeMap::new();
        meta.insert("kind".to_string(), "phase1".to_string());
        meta.insert("config_hash".into(), self.cfg.fingerprint());
        meta.insert("epoch".into(), self.cursor.epoch.to_string());
        meta.insert("step_in_epoch".into(), self.cursor.step_in_epoch.to_string());
        meta.insert("step".into(), self.cursor.step.to_string());
        meta.insert("adam_step".into(), self.adam[0].step.to_string());
        meta.insert("divergent_steps".into(), self.above.to_string());
        meta.extend(rng_state(&self.rng));
        write_atomic(&sidecar_path(path), kv::format(&meta).as_bytes())
    }

    /// Restores a trainer saved by [`Phase1Trainer::save_checkpoint`] with
    /// the same configuration.
    pub fn resume(cfg: Phase1Config, path: &Path) -> Result<Self> {
        cfg.validate()?;
        let meta = kv::parse(&std::fs::read_to_string(sidecar_path(path))?)?;
        if kv::get::<String>(&meta, "kind")? != "phase1" {
            return Err(Error::Format("checkpoint is not a phase-one checkpoint".into()));
        }
        let hash: String = kv::get(&meta, "config_hash")?;
        if hash != cfg.fingerprint() {
            return Err(Error::Config(format!(
                "checkpoint config hash {hash} does not match current config {}",
                cfg.fingerprint()
            )));
        }
        let file = WeightFile::load(path)?;
        let p = &cfg.params;
        let tx = Transmitter {
            net: NetParams::import(&crate::nets::tx_specs(p), "tx", &file)?,
            mode: cfg.mode,
            symbols_per_message: p.symbols_per_message,
        };
        let sd = SequenceDecoder {
            pe: NetParams::import(&crate::nets::pe_specs(p), "pe", &file)?,
            fe: NetParams::import(&crate::nets::fe_specs(p), "fe", &file)?,
            rx: NetParams::import(&crate::nets::rx_specs(p), "rx", &file)?,
            params: p.clone(),
        };
        let lr = cfg.schedule.lr;
        let step: u64 = kv::get(&meta, "adam_step")?;
        let adam = [
            import_adam("tx", &tx.net, lr, step, &file)?,
            import_adam("pe", &sd.pe, lr, step, &file)?,
            import_adam("fe", &sd.fe, lr, step, &file)?,
            import_adam("rx", &sd.rx, lr, step, &file)?,
        ];
        let cursor = Cursor {
            epoch: kv::get(&meta, "epoch")?,
            step_in_epoch: kv::get(&meta, "step_in_epoch")?,
            step: kv::get(&meta, "step")?,
        };
        let rng = restore_rng(&meta)?;
        Ok(Phase1Trainer { cfg, tx, sd, adam, rng, cursor, above: kv::get(&meta, "divergent_steps")? })
    }
}

/// Runs a full Phase-I schedule and returns TX and SD.
pub fn train_phase1(cfg: Phase1Config, progress: impl FnMut(&StepReport)) -> Result<(Transmitter, SequenceDecoder)> {
    let mut t = Phase1Trainer::new(cfg)?;
    t.run(None, progress)?;
    Ok((t.tx, t.sd))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OeConfig {
    pub params: SystemParams,
    /// Channel for the windows; `tau_bound` is the fractional part of the
    /// planted offset (±0.5 sample by default).
    pub channel: StochasticChannelConfig,
    pub schedule: Schedule,
    pub seed: u64,
    pub max_chunk: usize,
}

impl OeConfig {
    pub fn new(params: SystemParams, schedule: Schedule, seed: u64) -> Self {
        let base = Phase1Config::new(params.clone(), schedule.clone(), seed);
        OeConfig { params, channel: StochasticChannelConfig { tau_bound: 0.5, ..base.channel }, schedule, seed, max_chunk: 1000 }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.channel.validate()?;
        self.schedule.validate()?;
        let p = &self.params;
        let lo = (p.n_msg() / 2) as i64;
        let hi = ((p.n_msg() - 1) / 2) as i64;
        let start = p.k1() as i64 - 1;
        if start - hi < 0 || (start + lo) as usize + p.n_seq() > p.channel_len() {
            return Err(Error::Config("offset range does not fit inside a training sequence".into()));
        }
        Ok(())
    }
}

/// Windows with planted offsets and their class labels.
pub fn oe_batch<R: Rng + ?Sized>(
    table: &TxTable,
    p: &SystemParams,
    ch: &StochasticChannelConfig,
    sigma2: f64,
    rows: usize,
    rng: &mut R,
) -> Result<(Tensor, Vec<usize>, Vec<i64>)> {
    let seqm = p.seq_messages();
    let (n_seq, n_msg) = (p.n_seq(), p.n_msg());
    let lo = -((n_msg / 2) as i64);
    let hi = ((n_msg - 1) / 2) as i64;
    let start0 = p.k1() as i64 - 1;
    let mut data = vec![0.0; rows * 2 * n_seq];
    let mut labels = Vec::with_capacity(rows);
    let mut offsets = Vec::with_capacity(rows);
    for r in 0..rows {
        let msgs: Vec<usize> = (0..seqm).map(|_| rng.random_range(0..p.messages)).collect();
        let draw = draw_channel(ch, rng);
        let g = rng.random_range(lo..=hi);
        let y = stochastic_channel_with_noise(&table.encode(&msgs), ch, &draw, sigma2)?;
        let s = (start0 - g) as usize;
        marshal_into(&y[s..s + n_seq], &mut data[r * 2 * n_seq..(r + 1) * 2 * n_seq]);
        labels.push(offset_to_class(g, n_msg));
        offsets.push(g);
    }
    Ok((Tensor::matrix(rows, 2 * n_seq, data)?, labels, offsets))
}

/// Trains the offset estimator against a frozen transmitter.
pub fn train_oe(tx: &Transmitter, cfg: &OeConfig, mut progress: impl FnMut(&StepReport)) -> Result<NetParams> {
    cfg.validate()?;
    let p = &cfg.params;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut oe = init_params(&oe_specs(p), &mut rng)?;
    let mut adam = AdamState::new(&oe, cfg.schedule.lr);
    let table = tx.table()?;
    let sigma2 = cfg.channel.sigma2() * table.average_energy();
    let mut cursor = Cursor::default();
    let threshold = 10.0 * (p.n_msg() as f64).ln();
    let mut above = 0;
    while let Some(epoch) = cursor.current(&cfg.schedule) {
        let batch = epoch.batch.min(epoch.messages - cursor.step_in_epoch as usize * epoch.batch);
        let mut grads: Option<crate::nn::Grads> = None;
        let mut loss_sum = 0.0;
        for lo in (0..batch).step_by(cfg.max_chunk) {
            let rows = cfg.max_chunk.min(batch - lo);
            let (w, labels, _) = oe_batch(&table, p, &cfg.channel, sigma2, rows, &mut rng)?;
            let (probs, trace) = oe.forward(&w)?;
            loss_sum += cross_entropy(&probs, &labels)? * rows as f64;
            let mut dl = softmax_cross_entropy_grad(&probs, &labels)?;
            dl.scale(rows as f64 / batch as f64);
            let (g, _) = oe.backward(&trace, crate::nn::OutputGrad::Logits(&dl))?;
            match grads.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grads = Some(g),
            }
        }
        adam_step(&mut oe, &grads.expect("batch is non-empty"), &mut adam)?;
        let loss = loss_sum / batch as f64;
        progress(&StepReport { cursor, batch, loss });
        cursor.advance(&cfg.schedule);
        if !loss.is_finite() || loss > threshold {
            above += 1;
            if above >= DIVERGENCE_STEPS || !loss.is_finite() {
                return Err(Error::Divergence { step: cursor.step, loss, threshold });
            }
        } else {
            above = 0;
        }
    }
    Ok(oe)
}

/// Settings for capturing drifting-channel streams.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordConfig {
    pub frames: usize,
    /// Zero samples before the first message.
    pub lead: usize,
    /// Zero samples after the filter tail.
    pub tail: usize,
    /// Eb/N0 per stream, cycled when there are more streams than entries.
    pub eb_n0_db: Vec<f64>,
    pub drift: DriftingChannelConfig,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedStream {
    pub samples: Vec<Complex64>,
    pub messages: Vec<Message>,
    /// Transmit-side sample position of every received sample.
    pub positions: Vec<f64>,
    pub eb_n0_db: f64,
    pub sigma2: f64,
}

impl RecordedStream {
    fn paths(dir: &Path, k: usize) -> (std::path::PathBuf, std::path::PathBuf) {
        (dir.join(format!("stream_{k:03}.iq")), dir.join(format!("stream_{k:03}.meta")))
    }

    /// Writes `stream_NNN.iq` (interleaved f64) and a kv sidecar holding the
    /// message log. Sample positions are not persisted.
    pub fn save(&self, dir: &Path, k: usize) -> Result<()> {
        let (iq, meta) = Self::paths(dir, k);
        crate::io::write_iq_file(&iq, &self.samples, crate::io::IqFormat::F64)?;
        let mut m = std::collections::BTreeMap::new();
        m.insert("eb_n0_db".to_string(), self.eb_n0_db.to_string());
        m.insert("sigma2".into(), self.sigma2.to_string());
        m.insert("samples".into(), self.samples.len().to_string());
        let log: Vec<String> = self.messages.iter().map(|m| m.index().to_string()).collect();
        m.insert("messages".into(), log.join(","));
        write_atomic(&meta, kv::format(&m).as_bytes())
    }

    pub fn load(dir: &Path, k: usize) -> Result<Self> {
        let (iq, meta) = Self::paths(dir, k);
        let m = kv::parse(&std::fs::read_to_string(&meta)?)?;
        let samples = crate::io::read_iq_file(&iq, crate::io::IqFormat::F64)?;
        let expected: usize = kv::get(&m, "samples")?;
        if samples.len() != expected {
            return Err(Error::Length { expected, got: samples.len() });
        }
        let log: String = kv::get(&m, "messages")?;
        let messages = log
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<usize>().map(Message::from_index).map_err(|_| Error::Format(format!("bad message {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(RecordedStream { samples, messages, positions: Vec::new(), eb_n0_db: kv::get(&m, "eb_n0_db")?, sigma2: kv::get(&m, "sigma2")? })
    }

    /// Loads `stream_000`, `stream_001`, ... until the first missing index.
    pub fn load_dir(dir: &Path) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        while Self::paths(dir, out.len()).1.exists() {
            out.push(Self::load(dir, out.len())?);
        }
        Ok(out)
    }
}

/// Pulse-shaped transmit stream for a message log, surrounded by zeros.
pub fn tx_stream(table: &TxTable, messages: &[Message], p: &SystemParams, lead: usize, tail: usize) -> Result<Vec<Complex64>> {
    let idx: Vec<usize> = messages.iter().map(|m| m.index()).collect();
    let filter = dsp::rrc_taps(p.gamma, p.alpha, p.filter_len, 0.0)?;
    let shaped = dsp::shape_symbols(&table.encode(&idx), p.gamma, &filter);
    let mut out = vec![Complex64::new(0.0, 0.0); lead];
    out.extend(shaped);
    out.extend(std::iter::repeat_n(Complex64::new(0.0, 0.0), tail));
    Ok(out)
}

/// Transmits `count` random message logs through independent drifting
/// channels.
pub fn record_training_streams(tx: &Transmitter, p: &SystemParams, cfg: &RecordConfig, count: usize) -> Result<Vec<RecordedStream>> {
    cfg.drift.validate()?;
    if cfg.eb_n0_db.is_empty() {
        return Err(Error::Config("record needs at least one Eb/N0 value".into()));
    }
    let table = tx.table()?;
    let es = table.average_energy();
    (0..count)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(k as u64 + 1);
            let messages: Vec<Message> =
                (0..cfg.frames * p.frame_messages).map(|_| Message::from_index(rng.random_range(0..p.messages))).collect();
            let stream = tx_stream(&table, &messages, p, cfg.lead, cfg.tail)?;
            let eb = cfg.eb_n0_db[k % cfg.eb_n0_db.len()];
            let sigma2 = eb_n0_to_sigma2(eb, p.rate()) * es;
            let mut state = DriftingChannelState::new(cfg.drift.clone(), &mut rng);
            let out = drifting_stream(&stream, &mut state, sigma2, &mut rng);
            Ok(RecordedStream { samples: out.samples, messages, positions: out.positions, eb_n0_db: eb, sigma2 })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    /// Streams whose initial BLER falls outside `[lo, hi]` are not used.
    pub admission: (f64, f64),
    pub stream: StreamConfig,
    pub batches: Vec<usize>,
    pub lr: f64,
    pub seed: u64,
    pub max_chunk: usize,
}

impl FinetuneConfig {
    pub fn new(p: &SystemParams, seed: u64) -> Self {
        FinetuneConfig {
            admission: (1e-4, 1e-2),
            stream: StreamConfig::new(p),
            batches: vec![1000, 5000, 10_000],
            lr: 1e-4,
            seed,
            max_chunk: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamAdmission {
    pub stream: usize,
    pub eb_n0_db: f64,
    pub frames: usize,
    pub compared: usize,
    pub errors: usize,
    pub bler: Option<f64>,
    pub admitted: bool,
    pub note: String,
}

/// Labeled windows sliced out of recorded streams.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneDataset {
    /// Marshalled windows, `2·N_seq` reals each.
    pub windows: Vec<f64>,
    pub labels: Vec<usize>,
    pub n_seq: usize,
    pub admissions: Vec<StreamAdmission>,
}

impl FinetuneDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn window(&self, i: usize) -> Vec<Complex64> {
        let w = 2 * self.n_seq;
        unmarshal(&self.windows[i * w..(i + 1) * w])
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let w = 2 * self.n_seq;
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(&self.windows[i * w..(i + 1) * w]);
        }
        Ok((Tensor::matrix(idx.len(), w, data)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

/// Decodes each recording with the current model, measures its BLER and,
/// for admitted streams, emits one labeled window per decoded message.
pub fn build_finetune_dataset(streams: &[RecordedStream], model: &Model, cfg: &FinetuneConfig) -> Result<FinetuneDataset> {
    let p = model.params();
    let n_seq = p.n_seq();
    let mut ds = FinetuneDataset { windows: Vec::new(), labels: Vec::new(), n_seq, admissions: Vec::new() };
    for (k, s) in streams.iter().enumerate() {
        let dec = decode_stream(&s.samples, model, &cfg.stream)?;
        let mut adm = StreamAdmission {
            stream: k,
            eb_n0_db: s.eb_n0_db,
            frames: dec.frames.len(),
            compared: 0,
            errors: 0,
            bler: None,
            admitted: false,
            note: String::new(),
        };
        let Some(al) = align_decoded(&dec, &s.messages, p, 4 * p.frame_messages, 0.5) else {
            adm.note = "synchronization failed on the first frame".into();
            warn!("stream {k}: {}", adm.note);
            ds.admissions.push(adm);
            continue;
        };
        let bler = al.bler();
        adm.compared = al.compared;
        adm.errors = al.errors;
        adm.bler = Some(bler);
        let (lo, hi) = cfg.admission;
        if !(bler >= lo && bler <= hi) {
            adm.note = format!("initial BLER {bler:.2e} outside [{lo:.0e}, {hi:.0e}]");
            info!("stream {k}: {}", adm.note);
            ds.admissions.push(adm);
            continue;
        }
        adm.admitted = true;
        let usable = s.messages.len().saturating_sub(p.ell - 1);
        for (b, frame) in dec.frames.iter().enumerate() {
            for u in 0..frame.messages.len() {
                let truth = al.first + b * p.decodable_per_frame() + u;
                if truth >= usable {
                    continue;
                }
                let start = frame.start + u * p.n_msg();
                let mut buf = vec![0.0; 2 * n_seq];
                marshal_into(&s.samples[start..start + n_seq], &mut buf);
                ds.windows.extend(buf);
                ds.labels.push(s.messages[truth].index());
            }
        }
        info!("stream {k}: admitted, BLER {bler:.2e}, {} windows so far", ds.len());
        ds.admissions.push(adm);
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneReport {
    /// Batch size actually used per epoch.
    pub batches: Vec<usize>,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub clipped: bool,
}

/// Supervised finetuning of PE, FE and RX; one pass over the data per
/// configured batch size. TX and OE are not touched.
pub fn finetune_receiver(ds: &FinetuneDataset, sd: &mut SequenceDecoder, cfg: &FinetuneConfig) -> Result<FinetuneReport> {
    if ds.is_empty() {
        return Err(Error::invalid("finetuning dataset is empty"));
    }
    if ds.n_seq != sd.params.n_seq() {
        return Err(Error::Length { expected: sd.params.n_seq(), got: ds.n_seq });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = [AdamState::new(&sd.pe, cfg.lr), AdamState::new(&sd.fe, cfg.lr), AdamState::new(&sd.rx, cfg.lr)];
    let mut report = FinetuneReport { batches: Vec::new(), epoch_losses: Vec::new(), clipped: false };
    for &want in &cfg.batches {
        let batch = want.min(ds.len());
        if batch < want {
            warn!("finetuning batch size {want} clipped to the dataset size {batch}");
            report.clipped = true;
        }
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(batch) {
            let mut acc: Option<SdGrads> = None;
            for part in idx.chunks(cfg.max_chunk) {
                let (w, labels) = ds.batch(part)?;
                let (probs, trace) = sd.forward(&w)?;
                loss_sum += cross_entropy(&probs, &labels)? * part.len() as f64;
                let mut dl = softmax_cross_entropy_grad(&probs, &labels)?;
                dl.scale(part.len() as f64 / idx.len() as f64);
                let (g, _) = sd.backward(&trace, &dl)?;
                match acc.as_mut() {
                    Some(a) => a.add_assign(&g),
                    None => acc = Some(g),
                }
            }
            let g = acc.expect("non-empty batch");
            let [a_pe, a_fe, a_rx] = &mut adam;
            adam_step(&mut sd.pe, &g.pe, a_pe)?;
            adam_step(&mut sd.fe, &g.fe, a_fe)?;
            adam_step(&mut sd.rx, &g.rx, a_rx)?;
        }
        report.batches.push(batch);
        report.epoch_losses.push(loss_sum / ds.len() as f64);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_schedule() -> Schedule {
        Schedule { epochs: vec![Epoch { messages: 40, batch: 8 }, Epoch { messages: 30, batch: 16 }], lr: 1e-3 }
    }

    #[test]
    fn schedule_arithmetic() {
        let s = Schedule::desk();
        s.validate().unwrap();
        assert_eq!(s.total_messages(), 3_000_000);
        assert_eq!(s.total_steps(), 10_000 + 5_000 + 1_000 + 500 + 100 + 50);
        assert_eq!(Schedule::full().epochs.len(), 60);
        let t = tiny_schedule();
        assert_eq!(t.total_steps(), 5 + 2);
        assert_eq!(Schedule::parse(&t.render(), 1e-3).unwrap(), t);
        assert!(Schedule::parse("100:50,100:10", 1e-3).is_err());
        assert!(Schedule::parse("100", 1e-3).is_err());
    }

    #[test]
    fn cursor_walks_the_schedule() {
        let s = tiny_schedule();
        let mut c = Cursor::default();
        let mut seen = Vec::new();
        while let Some(e) = c.current(&s) {
            seen.push((c.epoch, e.batch));
            c.advance(&s);
        }
        assert_eq!(seen, vec![(0, 8), (0, 8), (0, 8), (0, 8), (0, 8), (1, 16), (1, 16)]);
        assert_eq!(c.step, 7);
    }

    #[test]
    fn phase1_steps_are_reproducible() {
        let cfg = Phase1Config::new(SystemParams::default(), tiny_schedule(), 3);
        let mut a = Phase1Trainer::new(cfg.clone()).unwrap();
        let mut b = Phase1Trainer::new(cfg).unwrap();
        for _ in 0..3 {
            let la = a.step().unwrap().unwrap().loss;
            let lb = b.step().unwrap().unwrap().loss;
            assert_eq!(la.to_bits(), lb.to_bits());
        }
        assert_eq!(a.tx, b.tx);
        assert_eq!(a.sd, b.sd);
    }

    #[test]
    fn last_partial_batch_is_trimmed() {
        let s = Schedule { epochs: vec![Epoch { messages: 10, batch: 4 }], lr: 1e-3 };
        let mut t = Phase1Trainer::new(Phase1Config::new(SystemParams::default(), s, 0)).unwrap();
        let sizes: Vec<usize> = std::iter::from_fn(|| t.step().unwrap().map(|r| r.batch)).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        assert!(t.finished());
    }

    #[test]
    fn chunked_batches_match_single_pass() {
        let s = Schedule { epochs: vec![Epoch { messages: 12, batch: 12 }], lr: 1e-3 };
        let mut one = Phase1Trainer::new(Phase1Config::new(SystemParams::default(), s.clone(), 5)).unwrap();
        let mut cfg = Phase1Config::new(SystemParams::default(), s, 5);
        cfg.max_chunk = 5;
        let mut chunked = Phase1Trainer::new(cfg).unwrap();
        let a = one.step().unwrap().unwrap().loss;
        let b = chunked.step().unwrap().unwrap().loss;
        assert!((a - b).abs() < 1e-12);
        let wa = one.sd.rx.layers()[0].weight.data();
        let wb = chunked.sd.rx.layers()[0].weight.data();
        let d = wa.iter().zip(wb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(d < 1e-12, "max weight difference {d}");
    }

    #[test]
    fn oe_windows_have_planted_labels() {
        let p = SystemParams::default();
        let tx = Transmitter::init(&p, PowerMode::Amplitude, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cfg = OeConfig::new(p.clone(), Schedule::oe_desk(), 0);
        cfg.validate().unwrap();
        let (w, labels, offsets) =
            oe_batch(&tx.table().unwrap(), &p, &cfg.channel, 0.0, 200, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(w.shape(), &[200, 352]);
        assert!(labels.iter().all(|&l| l < 16));
        assert!(offsets.iter().all(|&g| (-8..=7).contains(&g)));
        for (l, g) in labels.iter().zip(&offsets) {
            assert_eq!(*l, offset_to_class(*g, 16));
        }
    }

    #[test]
    fn recorded_stream_lengths_and_replay() {
        let p = SystemParams::default();
        let tx = Transmitter::init(&p, PowerMode::Amplitude, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let cfg = RecordConfig {
            frames: 3,
            lead: 40,
            tail: 25,
            eb_n0_db: vec![200.0],
            drift: DriftingChannelConfig::still(),
            seed: 9,
        };
        let rec = record_training_streams(&tx, &p, &cfg, 2).unwrap();
        for r in &rec {
            assert_eq!(r.messages.len(), 300);
            assert_eq!(r.samples.len(), 3 * 1600 + 40 + (p.filter_len - 1) + 25);
            let clean = tx_stream(&tx.table().unwrap(), &r.messages, &p, 40, 25).unwrap();
            let err = r.samples.iter().zip(&clean).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(err < 1e-8, "replay error {err}");
        }
        assert_ne!(rec[0].messages, rec[1].messages);
        let dir = tempfile::tempdir().unwrap();
        for (k, r) in rec.iter().enumerate() {
            r.save(dir.path(), k).unwrap();
        }
        let back = RecordedStream::load_dir(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].samples, rec[1].samples);
        assert_eq!(back[1].messages, rec[1].messages);
        assert_eq!(back[1].eb_n0_db, rec[1].eb_n0_db);
    }
}
