//! Helpers shared by the integration tests.

#![allow(dead_code)]

use e2e_phy::channel::{draw_channel, StochasticChannelConfig};
use e2e_phy::nets::{PowerMode, SequenceDecoder, Transmitter};
use e2e_phy::nn::{init_params, Grads, LayerSpec, NetParams, OutputGrad, Tensor};
use e2e_phy::params::SystemParams;
use e2e_phy::training::phase1_gradients;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;
/// Central differences at `FD_STEP` on O(1) losses resolve gradients to
/// about 1e-10 absolute; entries smaller than this floor are compared on an
/// absolute scale instead of relative to their own tiny magnitude.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_FLOOR)
}

/// Flat parameter coordinates `(tensor, index)` to probe: the largest
/// analytic entries of each tensor plus a random sample.
pub fn probe_coords<R: Rng>(g: &Grads, top: usize, random: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (t, tensor) in g.tensors().enumerate() {
        let d = tensor.data();
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by(|&i, &j| d[j].abs().total_cmp(&d[i].abs()));
        out.extend(order.iter().take(top).map(|&i| (t, i)));
        out.extend(sample(rng, d.len(), random.min(d.len())).into_iter().map(|i| (t, i)));
    }
    out.sort_unstable();
    out.dedup();
    out
}

/// Adds `delta` to one parameter coordinate.
pub fn nudge(net: &mut NetParams, (t, i): (usize, usize), delta: f64) {
    let mut k = 0;
    for layer in net.layers_mut() {
        for tensor in std::iter::once(&mut layer.weight).chain(layer.bias.as_mut()) {
            if k == t {
                tensor.data_mut()[i] += delta;
                return;
            }
            k += 1;
        }
    }
    panic!("tensor {t} out of range");
}

/// Largest relative error between `analytic` and central differences of
/// `loss` over the probed coordinates.
pub fn fd_max_rel_err(net: &NetParams, analytic: &Grads, coords: &[(usize, usize)], loss: impl Fn(&NetParams) -> f64) -> f64 {
    let tensors: Vec<&[f64]> = analytic.tensors().map(|t| t.data()).collect();
    coords
        .iter()
        .map(|&c| {
            let mut plus = net.clone();
            nudge(&mut plus, c, FD_STEP);
            let mut minus = net.clone();
            nudge(&mut minus, c, -FD_STEP);
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * FD_STEP);
            rel_err(tensors[c.0][c.1], numeric)
        })
        .fold(0.0, f64::max)
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks `L = Σ c ⊙ f(x)` for a random projection `c`.
pub fn check_projection(specs: &[LayerSpec], input: Tensor, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = init_params(specs, &mut rng).unwrap();
    let out = net.infer(&input).unwrap();
    let c = random_tensor(out.rows(), out.cols(), &mut rng);
    let loss = |n: &NetParams| n.infer(&input).unwrap().data().iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>();
    let (_, trace) = net.forward(&input).unwrap();
    let (g, _) = net.backward(&trace, OutputGrad::Output(&c)).unwrap();
    fd_max_rel_err(&net, &g, &probe_coords(&g, 8, 24, &mut rng), loss)
}

/// Whole Phase-I path: TX, pulse shaping, channel impairments with a frozen
/// draw, phase correction, feature extraction and the receiver.
pub fn composition_error(mode: PowerMode, seed: u64) -> f64 {
    let p = SystemParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tx = Transmitter::init(&p, mode, &mut rng).unwrap();
    let sd = SequenceDecoder::init(&p, &mut rng).unwrap();
    let ch = StochasticChannelConfig::default();
    let rows = 3;
    let msgs: Vec<usize> = (0..rows * p.seq_messages()).map(|_| rng.random_range(0..p.messages)).collect();
    let draws: Vec<_> = (0..rows).map(|_| draw_channel(&ch, &mut rng)).collect();
    let sigma2 = Some(0.05);
    let loss = |tx: &Transmitter, sd: &SequenceDecoder| phase1_gradients(tx, sd, &msgs, &draws, &ch, sigma2, 2).unwrap().0;
    let (_, gtx, gsd) = phase1_gradients(&tx, &sd, &msgs, &draws, &ch, sigma2, 2).unwrap();

    let mut worst: f64 = 0.0;
    let c = probe_coords(&gtx, 6, 6, &mut rng);
    worst = worst.max(fd_max_rel_err(&tx.net, &gtx, &c, |n| loss(&Transmitter { net: n.clone(), ..tx.clone() }, &sd)));
    let c = probe_coords(&gsd.pe, 6, 6, &mut rng);
    worst = worst.max(fd_max_rel_err(&sd.pe, &gsd.pe, &c, |n| loss(&tx, &SequenceDecoder { pe: n.clone(), ..sd.clone() })));
    let c = probe_coords(&gsd.fe, 6, 6, &mut rng);
    worst = worst.max(fd_max_rel_err(&sd.fe, &gsd.fe, &c, |n| loss(&tx, &SequenceDecoder { fe: n.clone(), ..sd.clone() })));
    let c = probe_coords(&gsd.rx, 6, 6, &mut rng);
    worst = worst.max(fd_max_rel_err(&sd.rx, &gsd.rx, &c, |n| loss(&tx, &SequenceDecoder { rx: n.clone(), ..sd.clone() })));
    worst
}
