//! System parameters and the index algebra derived from them.
//!
//! Sample indices returned by `k1`, `k2`, `l1`, `l2` are 1-based and
//! inclusive, as they appear in the link description; use the `*_range`
//! helpers for 0-based slicing.

use std::ops::Range;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SystemParams {
    /// Occupied bandwidth W in Hz (informational).
    pub bandwidth_hz: f64,
    /// Nominal carrier frequency in Hz (informational).
    pub carrier_hz: f64,
    /// Messages per frame B.
    pub frame_messages: usize,
    /// Sample rate f_s in Hz.
    pub sample_rate_hz: f64,
    /// Samples per symbol γ.
    pub gamma: usize,
    /// RRC roll-off α.
    pub alpha: f64,
    /// RRC filter length L (odd).
    pub filter_len: usize,
    /// Number of messages M (power of two).
    pub messages: usize,
    /// Complex symbols per message n.
    pub symbols_per_message: usize,
    /// Guard messages ℓ on each side of the decoded message.
    pub ell: usize,
    /// Complex features F from the feature extractor.
    pub features: usize,
}

impl Default for SystemParams {
    fn default() -> Self {
        SystemParams {
            bandwidth_hz: 500e3,
            carrier_hz: 2.35e9,
            frame_messages: 100,
            sample_rate_hz: 2e6,
            gamma: 4,
            alpha: 0.35,
            filter_len: 31,
            messages: 256,
            symbols_per_message: 4,
            ell: 6,
            features: 4,
        }
    }
}

impl SystemParams {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.gamma == 0 || self.symbols_per_message == 0 {
            return fail("gamma and symbols_per_message must be positive".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return fail(format!("alpha = {} outside (0, 1]", self.alpha));
        }
        if self.filter_len % 2 == 0 {
            return fail(format!("filter_len = {} must be odd", self.filter_len));
        }
        if self.messages < 2 || !self.messages.is_power_of_two() {
            return fail(format!("messages = {} must be a power of two >= 2", self.messages));
        }
        if self.ell == 0 {
            return fail("ell must be at least 1".into());
        }
        if self.frame_messages <= 2 * (self.ell - 1) {
            return fail(format!(
                "frame_messages = {} leaves no decodable message with ell = {}",
                self.frame_messages, self.ell
            ));
        }
        // The receiver slice [l1, l2] must sit inside the window.
        if self.gamma > (self.ell - 1) * self.n_msg() {
            return fail("gamma too large for the receiver slice".into());
        }
        if !(self.sample_rate_hz > 0.0) {
            return fail("sample_rate_hz must be positive".into());
        }
        Ok(())
    }

    /// Bits per message k.
    pub fn bits(&self) -> usize {
        self.messages.trailing_zeros() as usize
    }

    /// Rate R in bits per channel use.
    pub fn rate(&self) -> f64 {
        self.bits() as f64 / self.symbols_per_message as f64
    }

    pub fn sample_period(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn symbol_period(&self) -> f64 {
        self.gamma as f64 / self.sample_rate_hz
    }

    /// Samples per message N_msg = γ·n.
    pub fn n_msg(&self) -> usize {
        self.gamma * self.symbols_per_message
    }

    /// Messages per training sequence, 2ℓ + 1.
    pub fn seq_messages(&self) -> usize {
        2 * self.ell + 1
    }

    pub fn seq_symbols(&self) -> usize {
        self.seq_messages() * self.symbols_per_message
    }

    /// Length of the pulse-shaped training sequence, (2ℓ+1)·N_msg + L − 1.
    pub fn channel_len(&self) -> usize {
        self.seq_messages() * self.n_msg() + self.filter_len - 1
    }

    pub fn k1(&self) -> usize {
        self.n_msg() + (self.filter_len + 1) / 2
    }

    pub fn k2(&self) -> usize {
        2 * self.ell * self.n_msg() + (self.filter_len - 1) / 2
    }

    /// Window length N_seq = (2ℓ − 1)·N_msg.
    pub fn n_seq(&self) -> usize {
        (2 * self.ell - 1) * self.n_msg()
    }

    pub fn l1(&self) -> usize {
        1 + (self.ell - 1) * self.n_msg() - self.gamma
    }

    pub fn l2(&self) -> usize {
        self.ell * self.n_msg() + self.gamma
    }

    /// Complex receiver inputs N_in = N_msg + 2γ + F.
    pub fn n_in(&self) -> usize {
        self.l2() - self.l1() + 1 + self.features
    }

    /// 0-based range of the window inside the channel output.
    pub fn window_range(&self) -> Range<usize> {
        self.k1() - 1..self.k2()
    }

    /// 0-based range of the receiver slice inside a window.
    pub fn rx_range(&self) -> Range<usize> {
        self.l1() - 1..self.l2()
    }

    /// Samples per frame N = B·N_msg.
    pub fn frame_len(&self) -> usize {
        self.frame_messages * self.n_msg()
    }

    /// Messages decoded per frame, B − 2(ℓ − 1).
    pub fn decodable_per_frame(&self) -> usize {
        self.frame_messages - 2 * (self.ell - 1)
    }

    /// Stream advance between frames, N − 2(ℓ − 1)·N_msg.
    pub fn frame_advance(&self) -> usize {
        self.decodable_per_frame() * self.n_msg()
    }

    /// Offset-estimator classes (one per sample position within a message).
    pub fn offset_classes(&self) -> usize {
        self.n_msg()
    }
}
