//! Experiment configuration: one flat `key = value` file covering the
//! system parameters, channels, schedules, seeds and output paths.
//! Unknown keys are rejected so a misspelling never silently falls back to
//! a default.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::baseline::DqpskConfig;
use crate::channel::{DriftingChannelConfig, StochasticChannelConfig};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, StopRule};
use crate::framesync::StreamConfig;
use crate::kv;
use crate::nets::PowerMode;
use crate::params::SystemParams;
use crate::training::{FinetuneConfig, OeConfig, Phase1Config, RecordConfig, Schedule};

/// Comma-separated list.
#[derive(Debug, Clone, PartialEq)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T> {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .map(|x| x.trim().parse::<T>().map_err(|_| Error::Config(format!("bad list item {x:?}"))))
            .collect::<Result<Vec<_>>>()
            .map(List)
    }
}

impl<T: fmt::Display> fmt::Display for List<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, x) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{x}")?;
        }
        Ok(())
    }
}

macro_rules! experiment_config {
    ($($key:ident : $ty:ty = $default:expr, $doc:literal;)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct ExperimentConfig {
            $(#[doc = $doc] pub $key: $ty,)*
        }

        impl Default for ExperimentConfig {
            fn default() -> Self {
                ExperimentConfig { $($key: $default,)* }
            }
        }

        /// `(key, description)` for every accepted key.
        pub const KEYS: &[(&str, &str)] = &[$((stringify!($key), $doc),)*];

        impl ExperimentConfig {
            pub fn to_kv(&self) -> BTreeMap<String, String> {
                let mut m = BTreeMap::new();
                $(m.insert(stringify!($key).to_string(), self.$key.to_string());)*
                m
            }

            fn from_merged(m: &BTreeMap<String, String>) -> Result<Self> {
                Ok(ExperimentConfig { $($key: kv::get(m, stringify!($key))?,)* })
            }
        }
    };
}

experiment_config! {
    seed: u64 = 1, "Master seed; every random stream derives from it.";
    output_dir: String = "runs".into(), "Directory for weights, checkpoints, recordings and CSVs.";
    power_mode: PowerMode = PowerMode::Amplitude, "Transmitter normalization: amplitude or average.";
    bandwidth_hz: f64 = 500e3, "Occupied bandwidth in Hz (informational).";
    carrier_hz: f64 = 2.35e9, "Carrier frequency in Hz (informational).";
    frame_messages: usize = 100, "Messages per synchronization frame.";
    sample_rate_hz: f64 = 2e6, "Sample rate in Hz.";
    gamma: usize = 4, "Samples per symbol.";
    alpha: f64 = 0.35, "RRC roll-off.";
    filter_len: usize = 31, "RRC filter length in taps (odd).";
    messages: usize = 256, "Message alphabet size.";
    symbols_per_message: usize = 4, "Complex channel uses per message.";
    ell: usize = 6, "Neighbor messages on each side of a decoded message.";
    features: usize = 4, "Complex features produced by the feature extractor.";
    train_eb_n0_db: f64 = 9.0, "Eb/N0 of the training channel in dB.";
    tau_bound: f64 = 1.0, "Training timing offset bound in samples.";
    cfo_std_hz: f64 = 750.0, "Training CFO standard deviation in Hz.";
    cfo_max_hz: f64 = 1500.0, "Training CFO bound in Hz.";
    schedule: String = Schedule::desk().render(), "Phase-one epochs as messages:batch pairs.";
    lr: f64 = 1e-3, "Phase-one learning rate.";
    max_chunk: usize = 1000, "Rows per forward/backward pass (memory bound).";
    checkpoint_every: u64 = 1000, "Steps between phase-one checkpoints.";
    oe_schedule: String = Schedule::oe_desk().render(), "Offset-estimator epochs as messages:batch pairs.";
    oe_lr: f64 = 1e-3, "Offset-estimator learning rate.";
    oe_fraction: f64 = 0.5, "Bound of the fractional offset added to planted integer offsets, in samples.";
    oe_stride: usize = 1, "Stride of offset-estimator windows within a frame.";
    drift_sfo_std_hz: f64 = 0.01, "Drifting channel: SFO random-walk step std in Hz per sample.";
    drift_sfo_max_hz: f64 = 40.0, "Drifting channel: SFO clamp in Hz.";
    drift_cfo_std_hz: f64 = 11.75, "Drifting channel: CFO random-walk step std in Hz per sample.";
    drift_cfo_max_hz: f64 = 1000.0, "Drifting channel: CFO clamp in Hz.";
    record_streams: usize = 20, "Recorded streams for finetuning.";
    record_frames: usize = 50, "Frames per recorded stream.";
    record_eb_n0_db: List<f64> = List(vec![9.0, 10.0, 11.0, 12.0]), "Eb/N0 values cycled across recorded streams.";
    record_lead: usize = 9, "Zero samples ahead of each stream.";
    finetune_bler_min: f64 = 1e-4, "Lowest initial BLER of an admitted stream.";
    finetune_bler_max: f64 = 1e-2, "Highest initial BLER of an admitted stream.";
    finetune_batches: List<usize> = List(vec![1000, 5000, 10_000]), "One finetuning epoch per batch size.";
    finetune_lr: f64 = 1e-4, "Finetuning learning rate.";
    eval_grid: List<f64> = List(vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0]), "Eb/N0 points in dB.";
    eval_min_errors: usize = 200, "Stop a point after this many block errors.";
    eval_max_trials: usize = 100_000, "Stop a point after this many blocks.";
    eval_frames_per_stream: usize = 20, "Frames per drifting-channel evaluation stream.";
    eval_batch_rows: usize = 1000, "Sequences per decoder call.";
    dqpsk_timing_phases: usize = 8, "Fractional timing phases per sample in the DQPSK timing search.";
}

impl ExperimentConfig {
    /// Parses a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let user = kv::parse(text)?;
        let mut merged = ExperimentConfig::default().to_kv();
        for (k, v) in user {
            match merged.get_mut(&k) {
                Some(slot) => *slot = v,
                None => return Err(Error::Config(format!("unknown config key {k:?}"))),
            }
        }
        let cfg = ExperimentConfig::from_merged(&merged)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ExperimentConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Every key with its value, preceded by its description.
    pub fn render(&self) -> String {
        let m = self.to_kv();
        KEYS.iter().map(|(k, doc)| format!("# {doc}\n{k} = {}\n", m[*k])).collect()
    }

    pub fn hash(&self) -> String {
        kv::hash(&self.to_kv())
    }

    pub fn validate(&self) -> Result<()> {
        self.system().validate()?;
        self.phase1()?.validate()?;
        self.oe()?.validate()?;
        self.drift().validate()?;
        self.dqpsk().validate()?;
        if self.record_eb_n0_db.0.is_empty() || self.eval_grid.0.is_empty() || self.finetune_batches.0.is_empty() {
            return Err(Error::Config("list values must not be empty".into()));
        }
        if !(self.finetune_bler_min <= self.finetune_bler_max) {
            return Err(Error::Config("finetune_bler_min exceeds finetune_bler_max".into()));
        }
        if self.oe_stride == 0 || self.frame_len() % self.oe_stride != 0 {
            return Err(Error::Config("oe_stride must divide the frame length".into()));
        }
        Ok(())
    }

    fn frame_len(&self) -> usize {
        self.system().frame_len()
    }

    pub fn system(&self) -> SystemParams {
        SystemParams {
            bandwidth_hz: self.bandwidth_hz,
            carrier_hz: self.carrier_hz,
            frame_messages: self.frame_messages,
            sample_rate_hz: self.sample_rate_hz,
            gamma: self.gamma,
            alpha: self.alpha,
            filter_len: self.filter_len,
            messages: self.messages,
            symbols_per_message: self.symbols_per_message,
            ell: self.ell,
            features: self.features,
        }
    }

    pub fn training_channel(&self) -> StochasticChannelConfig {
        let p = self.system();
        let per_hz = std::f64::consts::TAU / self.sample_rate_hz;
        StochasticChannelConfig {
            gamma: p.gamma,
            alpha: p.alpha,
            filter_len: p.filter_len,
            tau_bound: self.tau_bound,
            cfo_sigma: self.cfo_std_hz * per_hz,
            cfo_min: -self.cfo_max_hz * per_hz,
            cfo_max: self.cfo_max_hz * per_hz,
            eb_n0_db: self.train_eb_n0_db,
            rate: p.rate(),
            input_symbols: p.seq_symbols(),
        }
    }

    pub fn phase1(&self) -> Result<Phase1Config> {
        let mut c = Phase1Config::new(self.system(), Schedule::parse(&self.schedule, self.lr)?, self.seed);
        c.channel = self.training_channel();
        c.mode = self.power_mode;
        c.max_chunk = self.max_chunk;
        Ok(c)
    }

    pub fn oe(&self) -> Result<OeConfig> {
        let mut c = OeConfig::new(self.system(), Schedule::parse(&self.oe_schedule, self.oe_lr)?, self.seed ^ 0x0e);
        c.channel = StochasticChannelConfig { tau_bound: self.oe_fraction, ..self.training_channel() };
        c.max_chunk = self.max_chunk;
        Ok(c)
    }

    pub fn drift(&self) -> DriftingChannelConfig {
        DriftingChannelConfig::from_hz(
            self.sample_rate_hz,
            self.drift_sfo_std_hz,
            self.drift_sfo_max_hz,
            self.drift_cfo_std_hz,
            self.drift_cfo_max_hz,
        )
    }

    pub fn stream(&self) -> StreamConfig {
        StreamConfig { stride: self.oe_stride, ..StreamConfig::new(&self.system()) }
    }

    pub fn record(&self) -> RecordConfig {
        RecordConfig {
            frames: self.record_frames,
            lead: self.record_lead,
            tail: self.frame_len(),
            eb_n0_db: self.record_eb_n0_db.0.clone(),
            drift: self.drift(),
            seed: self.seed ^ 0x4ec,
        }
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            admission: (self.finetune_bler_min, self.finetune_bler_max),
            stream: self.stream(),
            batches: self.finetune_batches.0.clone(),
            lr: self.finetune_lr,
            seed: self.seed ^ 0xf1,
            max_chunk: self.max_chunk,
        }
    }

    pub fn dqpsk(&self) -> DqpskConfig {
        DqpskConfig { timing_phases: self.dqpsk_timing_phases, ..DqpskConfig::new(&self.system()) }
    }

    pub fn eval(&self) -> EvalConfig {
        let mut c = EvalConfig::new(self.system(), self.seed ^ 0xe7a1);
        c.stochastic = self.training_channel();
        c.drift = self.drift();
        c.dqpsk = self.dqpsk();
        c.stream = self.stream();
        c.frames_per_stream = self.eval_frames_per_stream;
        c.lead = self.record_lead;
        c.stop = StopRule { min_errors: self.eval_min_errors, max_trials: self.eval_max_trials };
        c.batch_rows = self.eval_batch_rows;
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let d = ExperimentConfig::default();
        d.validate().unwrap();
        assert_eq!(ExperimentConfig::parse(&d.render()).unwrap(), d);
        assert_eq!(ExperimentConfig::parse("").unwrap(), d);
        assert_eq!(KEYS.len(), d.to_kv().len());
    }

    #[test]
    fn defaults_match_system_defaults() {
        let d = ExperimentConfig::default();
        assert_eq!(d.system(), SystemParams::default());
        assert_eq!(d.training_channel(), StochasticChannelConfig::default());
        assert_eq!(d.drift(), DriftingChannelConfig::default());
        assert_eq!(d.phase1().unwrap().schedule, Schedule::desk());
    }

    #[test]
    fn unknown_and_malformed_keys_are_errors() {
        assert!(matches!(ExperimentConfig::parse("sed = 3"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("seed = x"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("filter_len = 30"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("schedule = 10:5,10:2"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::parse("eval_grid = 1,,2"), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_change_the_hash() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig::parse("seed = 2\neval_grid = 4, 8").unwrap();
        assert_eq!(b.seed, 2);
        assert_eq!(b.eval_grid.0, vec![4.0, 8.0]);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
    }
}
