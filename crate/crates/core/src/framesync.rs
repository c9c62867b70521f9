//! Frame synchronization and continuous-stream decoding.
//!
//! Offsets follow one convention throughout: for a window starting at stream
//! index `i`, the offset `g` is the distance to the nearest message-aligned
//! start `a`, i.e. `a = i + g` with `g ∈ [-⌊N_msg/2⌋, ⌊(N_msg-1)/2⌋]`. A window
//! is aligned when it starts on the first-symbol pulse peak of a message;
//! the decoded message is then the `ℓ`-th message in the window.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::nets::{windows_tensor, Message, Model, SequenceDecoder};
use crate::nn::{NetParams, Tensor};
use crate::params::SystemParams;

/// Columns of the sliding-window matrix: column `j` (0-based) is
/// `v[j·q .. j·q + d]`, for `1 + ⌊(r − d)/q⌋` columns.
pub fn pi_matrix<T>(v: &[T], d: usize, q: usize) -> Result<Vec<&[T]>> {
    if d == 0 || q == 0 {
        return Err(Error::invalid("window length and stride must be positive"));
    }
    if d > v.len() {
        return Err(Error::invalid(format!("window length {d} exceeds vector length {}", v.len())));
    }
    let m = 1 + (v.len() - d) / q;
    Ok((0..m).map(|j| &v[j * q..j * q + d]).collect())
}

/// Maps a 1-based argmax position `tau` to a signed sample offset.
pub fn tau_to_offset(tau: usize, n_msg: usize) -> i64 {
    let t = tau as i64 - 1;
    let half = n_msg.div_ceil(2) as i64;
    t - n_msg as i64 * t.div_euclid(half)
}

/// 0-based class index of a signed offset (inverse of [`tau_to_offset`]).
pub fn offset_to_class(g: i64, n_msg: usize) -> usize {
    g.rem_euclid(n_msg as i64) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffsetEstimate {
    pub offset: i64,
    /// Averaged, position-compensated class probabilities.
    pub probs: Vec<f64>,
}

/// Rows processed per OE call, to bound memory.
const OE_CHUNK: usize = 512;

/// Averages OE votes over consecutive windows and picks the frame offset.
///
/// `columns[u]` must start `u·q` samples after `columns[0]`. Each vote is
/// circularly shifted right by `u·q` so that all windows vote for the offset
/// of the first one. `restrict` limits the decision to the given offsets.
pub fn estimate_offset(
    columns: &[&[Complex64]],
    oe: &NetParams,
    q: usize,
    restrict: Option<&[i64]>,
) -> Result<OffsetEstimate> {
    if columns.is_empty() {
        return Err(Error::invalid("no windows to estimate an offset from"));
    }
    let n = oe.fan_out();
    let mut acc = vec![0.0; n];
    for (c, chunk) in columns.chunks(OE_CHUNK).enumerate() {
        let probs = oe.infer(&windows_tensor(chunk)?)?;
        for r in 0..probs.rows() {
            let u = c * OE_CHUNK + r;
            let shift = (u * q) % n;
            for (k, &p) in probs.row(r).iter().enumerate() {
                acc[(k + shift) % n] += p;
            }
        }
    }
    let m = columns.len() as f64;
    acc.iter_mut().for_each(|v| *v /= m);
    let best = match restrict {
        None => crate::nets::argmax(&acc),
        Some(cands) => {
            if cands.is_empty() {
                return Err(Error::invalid("empty candidate set"));
            }
            cands
                .iter()
                .map(|&g| offset_to_class(g, n))
                .fold(None::<usize>, |best, c| match best {
                    Some(b) if acc[b] >= acc[c] => Some(b),
                    _ => Some(c),
                })
                .unwrap()
        }
    };
    Ok(OffsetEstimate { offset: tau_to_offset(best + 1, n), probs: acc })
}

/// Decodes every column of a frame (windows spaced one message apart).
pub fn decode_frame(columns: &[&[Complex64]], sd: &SequenceDecoder) -> Result<Vec<Message>> {
    let p = &sd.params;
    let expected = p.decodable_per_frame();
    if columns.len() != expected {
        return Err(Error::Length { expected, got: columns.len() });
    }
    let mut out = Vec::with_capacity(columns.len());
    for chunk in columns.chunks(OE_CHUNK) {
        out.extend(sd.decode(&windows_tensor(chunk)?)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    /// First stream index considered; leaves room for negative first offsets.
    pub start: usize,
    /// Stride of the offset-estimation windows.
    pub stride: usize,
    /// Offsets allowed after the first frame.
    pub tracking: Vec<i64>,
    /// Stop after this many frames.
    pub max_frames: Option<usize>,
}

impl StreamConfig {
    pub fn new(p: &SystemParams) -> Self {
        StreamConfig { start: p.n_msg() / 2, stride: 1, tracking: vec![-1, 0, 1], max_frames: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedFrame {
    /// Stream index of the frame's first sample, `i + î`.
    pub start: usize,
    pub offset: i64,
    pub messages: Vec<Message>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamDecode {
    pub frames: Vec<DecodedFrame>,
    /// The stream ended before another full frame was available.
    pub truncated: bool,
}

impl StreamDecode {
    pub fn messages(&self) -> impl Iterator<Item = Message> + '_ {
        self.frames.iter().flat_map(|f| f.messages.iter().copied())
    }
}

/// Frame-by-frame decoding of a received stream.
///
/// The first frame's offset is searched over the full class range; later
/// frames only over `cfg.tracking`. Consecutive frames overlap by `2(ℓ−1)`
/// messages so decoding continues seamlessly.
pub fn decode_stream(samples: &[Complex64], model: &Model, cfg: &StreamConfig) -> Result<StreamDecode> {
    let p = model.params();
    let (n, n_seq, n_msg) = (p.frame_len(), p.n_seq(), p.n_msg());
    let mut frames = Vec::new();
    let mut i = cfg.start;
    loop {
        if cfg.max_frames.is_some_and(|m| frames.len() >= m) {
            return Ok(StreamDecode { frames, truncated: false });
        }
        if i + n > samples.len() {
            break;
        }
        let cols = pi_matrix(&samples[i..i + n], n_seq, cfg.stride)?;
        let restrict = if frames.is_empty() { None } else { Some(cfg.tracking.as_slice()) };
        let est = estimate_offset(&cols, &model.oe, cfg.stride, restrict)?;
        let ib = i as i64 + est.offset;
        if ib < 0 || ib as usize + n > samples.len() {
            break;
        }
        let ib = ib as usize;
        let cols = pi_matrix(&samples[ib..ib + n], n_seq, n_msg)?;
        let messages = decode_frame(&cols, &model.sd)?;
        frames.push(DecodedFrame { start: ib, offset: est.offset, messages });
        i = ib + p.frame_advance();
    }
    Ok(StreamDecode { frames, truncated: true })
}

/// Correspondence between decoded frames and the transmitted message log.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Log index of the first decoded message.
    pub first: usize,
    /// Messages compared against the log.
    pub compared: usize,
    pub errors: usize,
    /// Per frame: (compared, errors).
    pub per_frame: Vec<(usize, usize)>,
}

impl Alignment {
    pub fn bler(&self) -> f64 {
        if self.compared == 0 {
            return f64::NAN;
        }
        self.errors as f64 / self.compared as f64
    }
}

/// Locks decoded frames onto the transmit log the way a pilot search would:
/// the first frame picks the log offset with the most matches, and every
/// later frame must continue exactly `decodable_per_frame` messages on.
///
/// Only log entries whose full window context was transmitted (`ℓ − 1`
/// successors inside the log) are compared. Returns `None` when the first
/// frame matches the log nowhere better than `min_match` of the time.
pub fn align_decoded(
    decoded: &StreamDecode,
    truth: &[Message],
    p: &SystemParams,
    max_first: usize,
    min_match: f64,
) -> Option<Alignment> {
    let first_frame = decoded.frames.first()?;
    let per = p.decodable_per_frame();
    let usable = truth.len().saturating_sub(p.ell - 1);
    let mut best: Option<(usize, usize)> = None;
    for m0 in 0..=max_first.min(usable.saturating_sub(1)) {
        let hits = first_frame
            .messages
            .iter()
            .enumerate()
            .filter(|(u, m)| m0 + u < usable && truth[m0 + u] == **m)
            .count();
        if best.is_none_or(|(_, h)| hits > h) {
            best = Some((m0, hits));
        }
    }
    let (first, hits) = best?;
    if (hits as f64) < min_match * first_frame.messages.len() as f64 {
        return None;
    }
    let mut per_frame = Vec::with_capacity(decoded.frames.len());
    for (b, frame) in decoded.frames.iter().enumerate() {
        let base = first + b * per;
        let mut compared = 0;
        let mut errors = 0;
        for (u, m) in frame.messages.iter().enumerate() {
            if base + u < usable {
                compared += 1;
                if truth[base + u] != *m {
                    errors += 1;
                }
            }
        }
        per_frame.push((compared, errors));
    }
    let compared = per_frame.iter().map(|f| f.0).sum();
    let errors = per_frame.iter().map(|f| f.1).sum();
    Some(Alignment { first, compared, errors, per_frame })
}

/// Marshalled windows for a set of stream start positions.
pub fn gather_windows(samples: &[Complex64], starts: &[usize], n_seq: usize) -> Result<Tensor> {
    let cols: Vec<&[Complex64]> = starts
        .iter()
        .map(|&s| samples.get(s..s + n_seq).ok_or_else(|| Error::invalid("window beyond stream end")))
        .collect::<Result<_>>()?;
    windows_tensor(&cols)
}
