//! The five link networks and the glue between them.
//!
//! * TX: message index → embedding → dense relu → dense linear → `n` complex
//!   symbols → power normalization.
//! * SD (sequence decoder): PE, FE and RX. PE estimates one complex phase
//!   correction from the whole window, FE extracts `F` complex features, RX
//!   classifies the phase-corrected center slice plus the features.
//! * OE: window → probability over the `N_msg` sample offsets.
//!
//! Complex vectors enter and leave the networks as `[all re ; all im]`.
//! Complex gradients are carried as `∂L/∂Re + j ∂L/∂Im`.

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{
    init_params, Activation, Grads, LayerSpec, NetParams, OutputGrad, Tensor, Trace, WeightFile,
};
use crate::params::SystemParams;

/// Width of every hidden layer.
pub const HIDDEN: usize = 256;

/// A message in `1..=M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Message(u32);

impl Message {
    pub fn new(s: u32, m: usize) -> Result<Self> {
        if s == 0 || s as usize > m {
            return Err(Error::invalid(format!("message {s} outside 1..={m}")));
        }
        Ok(Message(s))
    }

    /// From a 0-based class index.
    pub fn from_index(i: usize) -> Self {
        Message(i as u32 + 1)
    }

    pub fn get(self) -> u32 {
        self.0
    }

    /// 0-based class index.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }
}

/// How the transmitter enforces its power constraint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PowerMode {
    /// Per block: `x ← x / max(1, max_i |x_i|)`.
    Amplitude,
    /// Over the whole message table: mean `|x_i|²` equals 1.
    AveragePower,
}

impl std::str::FromStr for PowerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "amplitude" => Ok(PowerMode::Amplitude),
            "average" | "average_power" => Ok(PowerMode::AveragePower),
            _ => Err(Error::Config(format!("unknown power mode {s:?} (amplitude|average)"))),
        }
    }
}

impl std::fmt::Display for PowerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PowerMode::Amplitude => "amplitude",
            PowerMode::AveragePower => "average",
        })
    }
}

pub fn tx_specs(p: &SystemParams) -> Vec<LayerSpec> {
    vec![
        LayerSpec::embedding(p.messages, p.messages),
        LayerSpec::dense(p.messages, HIDDEN, Activation::Relu),
        LayerSpec::dense(HIDDEN, 2 * p.symbols_per_message, Activation::Linear),
    ]
}

pub fn rx_specs(p: &SystemParams) -> Vec<LayerSpec> {
    vec![
        LayerSpec::dense(2 * p.n_in(), HIDDEN, Activation::Relu),
        LayerSpec::dense(HIDDEN, HIDDEN, Activation::Relu),
        LayerSpec::dense(HIDDEN, p.messages, Activation::Softmax),
    ]
}

pub fn pe_specs(p: &SystemParams) -> Vec<LayerSpec> {
    vec![
        LayerSpec::dense(2 * p.n_seq(), HIDDEN, Activation::Relu),
        LayerSpec::dense(HIDDEN, 2, Activation::Linear),
    ]
}

pub fn fe_specs(p: &SystemParams) -> Vec<LayerSpec> {
    vec![
        LayerSpec::dense(2 * p.n_seq(), HIDDEN, Activation::Relu),
        LayerSpec::dense(HIDDEN, 2 * p.features, Activation::Linear),
    ]
}

pub fn oe_specs(p: &SystemParams) -> Vec<LayerSpec> {
    vec![
        LayerSpec::dense(2 * p.n_seq(), HIDDEN, Activation::Relu),
        LayerSpec::dense(HIDDEN, HIDDEN, Activation::Relu),
        LayerSpec::dense(HIDDEN, HIDDEN, Activation::Relu),
        LayerSpec::dense(HIDDEN, p.offset_classes(), Activation::Softmax),
    ]
}

/// Writes `z` as `[re ; im]` into `out` (length `2·z.len()`).
pub fn marshal_into(z: &[Complex64], out: &mut [f64]) {
    let n = z.len();
    for (k, v) in z.iter().enumerate() {
        out[k] = v.re;
        out[n + k] = v.im;
    }
}

pub fn marshal(z: &[Complex64]) -> Vec<f64> {
    let mut out = vec![0.0; 2 * z.len()];
    marshal_into(z, &mut out);
    out
}

pub fn unmarshal(r: &[f64]) -> Vec<Complex64> {
    let n = r.len() / 2;
    (0..n).map(|k| Complex64::new(r[k], r[n + k])).collect()
}

/// Stacks windows into a `rows × 2·len` network input.
pub fn windows_tensor<W: AsRef<[Complex64]>>(windows: &[W]) -> Result<Tensor> {
    let len = windows.first().map(|w| w.as_ref().len()).ok_or_else(|| Error::invalid("no windows"))?;
    let mut data = vec![0.0; windows.len() * 2 * len];
    for (r, w) in windows.iter().enumerate() {
        let w = w.as_ref();
        if w.len() != len {
            return Err(Error::Length { expected: len, got: w.len() });
        }
        marshal_into(w, &mut data[r * 2 * len..(r + 1) * 2 * len]);
    }
    Tensor::matrix(windows.len(), 2 * len, data)
}

/// Extracts the window `y[k1..=k2]` (1-based) from a training-sequence output.
pub fn slice_seq<'a>(y: &'a [Complex64], p: &SystemParams) -> Result<&'a [Complex64]> {
    if y.len() != p.channel_len() {
        return Err(Error::Length { expected: p.channel_len(), got: y.len() });
    }
    Ok(&y[p.window_range()])
}

/// Learned transmitter.
#[derive(Debug, Clone, PartialEq)]
pub struct Transmitter {
    pub net: NetParams,
    pub mode: PowerMode,
    pub symbols_per_message: usize,
}

/// Normalized symbols for every message, row `m` holding message index `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct TxTable {
    symbols: Vec<Complex64>,
    raw: Vec<Complex64>,
    n: usize,
    mode: PowerMode,
    /// Amplitude mode: per-row divisor. Power mode: one entry, the mean power.
    norms: Vec<f64>,
}

/// Forward trace needed to backpropagate into the TX parameters.
#[derive(Debug)]
pub struct TxTrace {
    net: Trace,
}

impl Transmitter {
    pub fn init<R: Rng + ?Sized>(p: &SystemParams, mode: PowerMode, rng: &mut R) -> Result<Self> {
        Ok(Transmitter { net: init_params(&tx_specs(p), rng)?, mode, symbols_per_message: p.symbols_per_message })
    }

    pub fn messages(&self) -> usize {
        self.net.fan_in()
    }

    fn indices(&self) -> Result<Tensor> {
        let m = self.messages();
        Tensor::matrix(m, 1, (0..m).map(|i| i as f64).collect())
    }

    pub fn table(&self) -> Result<TxTable> {
        let raw = self.net.infer(&self.indices()?)?;
        Ok(self.normalize(&raw))
    }

    pub fn table_with_trace(&self) -> Result<(TxTable, TxTrace)> {
        let (raw, trace) = self.net.forward(&self.indices()?)?;
        Ok((self.normalize(&raw), TxTrace { net: trace }))
    }

    /// Symbols of one message.
    pub fn transmit(&self, s: Message) -> Result<Vec<Complex64>> {
        if s.index() >= self.messages() {
            return Err(Error::invalid(format!("message {} outside 1..={}", s.get(), self.messages())));
        }
        Ok(self.table()?.block(s.index()).to_vec())
    }

    fn normalize(&self, raw: &Tensor) -> TxTable {
        let n = self.symbols_per_message;
        let raw: Vec<Complex64> = (0..raw.rows()).flat_map(|r| unmarshal(raw.row(r))).collect();
        let mut symbols = raw.clone();
        let norms = match self.mode {
            PowerMode::Amplitude => symbols
                .chunks_mut(n)
                .map(|block| {
                    let peak = block.iter().map(|z| z.norm()).fold(0.0, f64::max);
                    let s = peak.max(1.0);
                    block.iter_mut().for_each(|z| *z /= s);
                    s
                })
                .collect(),
            PowerMode::AveragePower => {
                let p = raw.iter().map(|z| z.norm_sqr()).sum::<f64>() / raw.len() as f64;
                let s = p.sqrt();
                symbols.iter_mut().for_each(|z| *z /= s);
                vec![p]
            }
        };
        TxTable { symbols, raw, n, mode: self.mode, norms }
    }

    /// Parameter gradients from a gradient on every table symbol
    /// (`messages × n`, zero for unused messages).
    pub fn backward(&self, table: &TxTable, trace: &TxTrace, grad: &[Complex64]) -> Result<Grads> {
        if grad.len() != table.symbols.len() {
            return Err(Error::Length { expected: table.symbols.len(), got: grad.len() });
        }
        let n = table.n;
        let mut g_raw = vec![Complex64::new(0.0, 0.0); grad.len()];
        match table.mode {
            PowerMode::Amplitude => {
                for (row, s) in table.norms.iter().enumerate() {
                    let z = &table.raw[row * n..(row + 1) * n];
                    let gx = &grad[row * n..(row + 1) * n];
                    let gz = &mut g_raw[row * n..(row + 1) * n];
                    if *s > 1.0 {
                        let peak = argmax_norm(z);
                        let a: f64 = gx.iter().zip(z).map(|(g, z)| (g.conj() * z).re).sum();
                        for j in 0..n {
                            gz[j] = gx[j] / *s;
                        }
                        gz[peak] += -a / (s * s) * z[peak] / z[peak].norm();
                    } else {
                        gz.copy_from_slice(gx);
                    }
                }
            }
            PowerMode::AveragePower => {
                let p = table.norms[0];
                let total = table.raw.len() as f64;
                let a: f64 = grad.iter().zip(&table.raw).map(|(g, z)| (g.conj() * z).re).sum();
                let c1 = p.powf(-0.5);
                let c2 = p.powf(-1.5) / total * a;
                for ((gz, gx), z) in g_raw.iter_mut().zip(grad).zip(&table.raw) {
                    *gz = gx * c1 - z * c2;
                }
            }
        }
        let rows = g_raw.len() / n;
        let mut out = Vec::with_capacity(2 * g_raw.len());
        for r in 0..rows {
            out.extend(marshal(&g_raw[r * n..(r + 1) * n]));
        }
        let g = Tensor::matrix(rows, 2 * n, out)?;
        Ok(self.net.backward(&trace.net, OutputGrad::Output(&g))?.0)
    }
}

/// First index of the largest magnitude.
fn argmax_norm(z: &[Complex64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if v.norm() > z[best].norm() {
            best = i;
        }
    }
    best
}

impl TxTable {
    pub fn messages(&self) -> usize {
        self.symbols.len() / self.n
    }

    pub fn symbols_per_message(&self) -> usize {
        self.n
    }

    pub fn block(&self, index: usize) -> &[Complex64] {
        &self.symbols[index * self.n..(index + 1) * self.n]
    }

    pub fn symbols(&self) -> &[Complex64] {
        &self.symbols
    }

    pub fn mode(&self) -> PowerMode {
        self.mode
    }

    /// Mean `|x|²` over every message and symbol.
    pub fn average_energy(&self) -> f64 {
        self.symbols.iter().map(|z| z.norm_sqr()).sum::<f64>() / self.symbols.len() as f64
    }

    pub fn peak_amplitude(&self) -> f64 {
        self.symbols.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Concatenated symbol blocks of a message sequence (0-based indices).
    pub fn encode(&self, indices: &[usize]) -> Vec<Complex64> {
        let mut out = Vec::with_capacity(indices.len() * self.n);
        for &i in indices {
            out.extend_from_slice(self.block(i));
        }
        out
    }

    /// Copy scaled to unit average symbol energy (the DQPSK symbol energy).
    pub fn rescaled_to_unit_power(&self) -> TxTable {
        let s = self.average_energy().sqrt();
        let mut t = self.clone();
        t.symbols.iter_mut().for_each(|z| *z /= s);
        t
    }
}

/// Parameter gradients for the three sequence-decoder networks.
#[derive(Debug, Clone, PartialEq)]
pub struct SdGrads {
    pub pe: Grads,
    pub fe: Grads,
    pub rx: Grads,
}

impl SdGrads {
    pub fn add_assign(&mut self, other: &SdGrads) {
        self.pe.add_assign(&other.pe);
        self.fe.add_assign(&other.fe);
        self.rx.add_assign(&other.rx);
    }

    pub fn scale(&mut self, f: f64) {
        self.pe.scale(f);
        self.fe.scale(f);
        self.rx.scale(f);
    }
}

/// Forward state of a batch through the sequence decoder.
#[derive(Debug)]
pub struct SdTrace {
    pe: Trace,
    fe: Trace,
    rx: Trace,
    h: Vec<Complex64>,
}

impl SdTrace {
    pub fn phase_estimates(&self) -> &[Complex64] {
        &self.h
    }
}

/// PE + FE + RX.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDecoder {
    pub pe: NetParams,
    pub fe: NetParams,
    pub rx: NetParams,
    pub params: SystemParams,
}

impl SequenceDecoder {
    pub fn init<R: Rng + ?Sized>(p: &SystemParams, rng: &mut R) -> Result<Self> {
        Ok(SequenceDecoder {
            pe: init_params(&pe_specs(p), rng)?,
            fe: init_params(&fe_specs(p), rng)?,
            rx: init_params(&rx_specs(p), rng)?,
            params: p.clone(),
        })
    }

    fn check_windows(&self, windows: &Tensor) -> Result<()> {
        let want = 2 * self.params.n_seq();
        if windows.rank() != 2 || windows.cols() != want {
            return Err(Error::shape(format!(
                "sequence decoder expects rows of {want} reals, got shape {:?}",
                windows.shape()
            )));
        }
        Ok(())
    }

    /// RX input rows from windows, phase estimates and features.
    fn rx_input(&self, windows: &Tensor, h_raw: &Tensor, f_raw: &Tensor) -> Result<(Tensor, Vec<Complex64>)> {
        let p = &self.params;
        let (n_seq, n_in, nf) = (p.n_seq(), p.n_in(), p.features);
        let range = p.rx_range();
        let slice_len = range.len();
        let rows = windows.rows();
        let mut data = vec![0.0; rows * 2 * n_in];
        let mut hs = Vec::with_capacity(rows);
        for r in 0..rows {
            let w = windows.row(r);
            let h = Complex64::new(h_raw.row(r)[0], h_raw.row(r)[1]);
            hs.push(h);
            let out = &mut data[r * 2 * n_in..(r + 1) * 2 * n_in];
            for (k, t) in range.clone().enumerate() {
                let y = Complex64::new(w[t], w[n_seq + t]) * h;
                out[k] = y.re;
                out[n_in + k] = y.im;
            }
            let f = f_raw.row(r);
            for j in 0..nf {
                out[slice_len + j] = f[j];
                out[n_in + slice_len + j] = f[nf + j];
            }
        }
        Ok((Tensor::matrix(rows, 2 * n_in, data)?, hs))
    }

    /// Message probabilities (`rows × M`) for marshalled windows.
    pub fn forward(&self, windows: &Tensor) -> Result<(Tensor, SdTrace)> {
        self.check_windows(windows)?;
        let (h_raw, pe) = self.pe.forward(windows)?;
        let (f_raw, fe) = self.fe.forward(windows)?;
        let (rx_in, h) = self.rx_input(windows, &h_raw, &f_raw)?;
        let (probs, rx) = self.rx.forward(&rx_in)?;
        Ok((probs, SdTrace { pe, fe, rx, h }))
    }

    pub fn infer(&self, windows: &Tensor) -> Result<Tensor> {
        self.check_windows(windows)?;
        let h_raw = self.pe.infer(windows)?;
        let f_raw = self.fe.infer(windows)?;
        let (rx_in, _) = self.rx_input(windows, &h_raw, &f_raw)?;
        self.rx.infer(&rx_in)
    }

    /// Decoded messages for marshalled windows.
    pub fn decode(&self, windows: &Tensor) -> Result<Vec<Message>> {
        let probs = self.infer(windows)?;
        Ok((0..probs.rows()).map(|r| Message::from_index(argmax(probs.row(r)))).collect())
    }

    /// Backward pass from the gradient w.r.t. the RX softmax logits.
    ///
    /// Returns parameter gradients and the gradient w.r.t. the marshalled
    /// windows.
    pub fn backward(&self, trace: &SdTrace, dlogits: &Tensor) -> Result<(SdGrads, Tensor)> {
        let p = &self.params;
        let (n_seq, n_in, nf) = (p.n_seq(), p.n_in(), p.features);
        let range = p.rx_range();
        let slice_len = range.len();
        let (g_rx, g_in) = self.rx.backward(&trace.rx, OutputGrad::Logits(dlogits))?;
        let g_in = g_in.expect("dense input");
        let windows = trace.pe.input();
        let rows = windows.rows();
        let mut g_w = Tensor::zeros(&[rows, 2 * n_seq]);
        let mut g_h = Tensor::zeros(&[rows, 2]);
        let mut g_f = Tensor::zeros(&[rows, 2 * nf]);
        for r in 0..rows {
            let gi = g_in.row(r);
            let w = windows.row(r);
            let h = trace.h[r];
            let gw = g_w.row_mut(r);
            let mut gh = Complex64::new(0.0, 0.0);
            for (k, t) in range.clone().enumerate() {
                let gy = Complex64::new(gi[k], gi[n_in + k]);
                let wv = Complex64::new(w[t], w[n_seq + t]);
                let gwv = gy * h.conj();
                gw[t] += gwv.re;
                gw[n_seq + t] += gwv.im;
                gh += gy * wv.conj();
            }
            g_h.row_mut(r).copy_from_slice(&[gh.re, gh.im]);
            let gf = g_f.row_mut(r);
            for j in 0..nf {
                gf[j] = gi[slice_len + j];
                gf[nf + j] = gi[n_in + slice_len + j];
            }
        }
        let (g_pe, gw_pe) = self.pe.backward(&trace.pe, OutputGrad::Output(&g_h))?;
        let (g_fe, gw_fe) = self.fe.backward(&trace.fe, OutputGrad::Output(&g_f))?;
        g_w.add_assign(&gw_pe.expect("dense input"));
        g_w.add_assign(&gw_fe.expect("dense input"));
        Ok((SdGrads { pe: g_pe, fe: g_fe, rx: g_rx }, g_w))
    }

    /// Single-window phase estimate `h`.
    pub fn estimate_phase(&self, window: &[Complex64]) -> Result<Complex64> {
        let out = self.pe.infer(&windows_tensor(&[window])?)?;
        Ok(Complex64::new(out.data()[0], out.data()[1]))
    }

    /// Single-window features.
    pub fn extract_features(&self, window: &[Complex64]) -> Result<Vec<Complex64>> {
        let out = self.fe.infer(&windows_tensor(&[window])?)?;
        Ok(unmarshal(out.data()))
    }

    /// Single-window decision and message probabilities.
    pub fn sequence_decode(&self, window: &[Complex64]) -> Result<(Message, Vec<f64>)> {
        let probs = self.infer(&windows_tensor(&[window])?)?;
        let b = probs.row(0).to_vec();
        Ok((Message::from_index(argmax(&b)), b))
    }
}

/// Offset-class probabilities for one window.
pub fn oe_forward(window: &[Complex64], oe: &NetParams) -> Result<Vec<f64>> {
    Ok(oe.infer(&windows_tensor(&[window])?)?.into_data())
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// All trained networks of one link.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub tx: Transmitter,
    pub sd: SequenceDecoder,
    pub oe: NetParams,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(p: &SystemParams, mode: PowerMode, rng: &mut R) -> Result<Self> {
        let tx = Transmitter::init(p, mode, rng)?;
        let sd = SequenceDecoder::init(p, rng)?;
        let oe = init_params(&oe_specs(p), rng)?;
        Ok(Model { tx, sd, oe })
    }

    pub fn params(&self) -> &SystemParams {
        &self.sd.params
    }

    pub fn export(&self, file: &mut WeightFile) {
        self.tx.net.export("tx", file);
        self.sd.pe.export("pe", file);
        self.sd.fe.export("fe", file);
        self.sd.rx.export("rx", file);
        self.oe.export("oe", file);
    }

    pub fn import(p: &SystemParams, mode: PowerMode, file: &WeightFile) -> Result<Self> {
        Ok(Model {
            tx: Transmitter {
                net: NetParams::import(&tx_specs(p), "tx", file)?,
                mode,
                symbols_per_message: p.symbols_per_message,
            },
            sd: SequenceDecoder {
                pe: NetParams::import(&pe_specs(p), "pe", file)?,
                fe: NetParams::import(&fe_specs(p), "fe", file)?,
                rx: NetParams::import(&rx_specs(p), "rx", file)?,
                params: p.clone(),
            },
            oe: NetParams::import(&oe_specs(p), "oe", file)?,
        })
    }
}

/// One `(message, symbol_index, re, im)` row per symbol; both indices 1-based.
pub fn constellation_points(table: &TxTable) -> Vec<(u32, usize, f64, f64)> {
    (0..table.messages())
        .flat_map(|m| {
            table
                .block(m)
                .iter()
                .enumerate()
                .map(move |(i, z)| (m as u32 + 1, i + 1, z.re, z.im))
        })
        .collect()
}
