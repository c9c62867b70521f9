use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Trainable lookup table: row `i` of a `fan_in × fan_out` matrix.
    Embedding,
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn embedding(vocab: usize, dim: usize) -> Self {
        LayerSpec {
            kind: LayerKind::Embedding,
            fan_in: vocab,
            fan_out: dim,
            activation: Activation::Linear,
        }
    }

    pub fn dense(fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        LayerSpec {
            kind: LayerKind::Dense,
            fan_in,
            fan_out,
            activation,
        }
    }

    pub fn has_bias(&self) -> bool {
        self.kind == LayerKind::Dense
    }

    pub fn param_count(&self) -> usize {
        self.fan_in * self.fan_out + if self.has_bias() { self.fan_out } else { 0 }
    }

    fn validate(&self) -> Result<()> {
        if self.fan_in == 0 || self.fan_out == 0 {
            return Err(Error::shape(format!("layer {self:?} has a zero dimension")));
        }
        if self.kind == LayerKind::Embedding && self.activation != Activation::Linear {
            return Err(Error::shape("embedding layers must be linear"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `fan_in × fan_out`, row-major.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

/// Parameters of one feed-forward network.
///
/// Every instance carries a unique identity and a generation counter that is
/// bumped on each parameter update, so a [`Trace`] can only be consumed by the
/// exact parameter state that produced it.
#[derive(Debug)]
pub struct NetParams {
    layers: Vec<Layer>,
    id: u64,
    generation: u64,
}

impl Clone for NetParams {
    fn clone(&self) -> Self {
        NetParams {
            layers: self.layers.clone(),
            id: next_id(),
            generation: 0,
        }
    }
}

impl PartialEq for NetParams {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

/// Activations cached by [`NetParams::forward`] for a later backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    net_id: u64,
    generation: u64,
    /// `acts[0]` is the input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Tensor>,
    unbatched: bool,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        self.acts.last().expect("trace holds at least the input")
    }

    pub fn input(&self) -> &Tensor {
        &self.acts[0]
    }
}

/// Gradient w.r.t. one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

/// Parameter gradients, shaped like [`NetParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<LayerGrad>,
}

impl Grads {
    pub fn zeros_like(net: &NetParams) -> Self {
        Grads {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Tensor::zeros(l.weight.shape()),
                    bias: l.bias.as_ref().map(|b| Tensor::zeros(b.shape())),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_assign(&b.weight);
            if let (Some(x), Some(y)) = (a.bias.as_mut(), b.bias.as_ref()) {
                x.add_assign(y);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.layers {
            g.weight.scale(factor);
            if let Some(b) = g.bias.as_mut() {
                b.scale(factor);
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors().map(Tensor::sum_squares).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers
            .iter()
            .flat_map(|g| std::iter::once(&g.weight).chain(g.bias.as_ref()))
    }
}

/// What the caller differentiates the loss against at the network output.
#[derive(Debug, Clone, Copy)]
pub enum OutputGrad<'a> {
    /// Gradient w.r.t. the final activation output.
    Output(&'a Tensor),
    /// Gradient w.r.t. the final layer's pre-activation (e.g. the fused
    /// softmax + cross-entropy gradient `p - onehot`).
    Logits(&'a Tensor),
}

impl NetParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("network needs at least one layer"));
        }
        for (i, layer) in layers.iter().enumerate() {
            let spec = layer.spec;
            spec.validate()?;
            if i > 0 && spec.kind == LayerKind::Embedding {
                return Err(Error::shape("embedding is only allowed as the first layer"));
            }
            if layer.weight.shape() != [spec.fan_in, spec.fan_out] {
                return Err(Error::shape(format!(
                    "layer {i}: weight shape {:?} != [{}, {}]",
                    layer.weight.shape(),
                    spec.fan_in,
                    spec.fan_out
                )));
            }
            match (&layer.bias, spec.has_bias()) {
                (Some(b), true) if b.shape() == [spec.fan_out] => {}
                (None, false) => {}
                _ => return Err(Error::shape(format!("layer {i}: bias does not match spec"))),
            }
            if !layer.weight.is_finite() || layer.bias.as_ref().is_some_and(|b| !b.is_finite()) {
                return Err(Error::shape(format!("layer {i}: non-finite parameters")));
            }
            if i > 0 && layers[i - 1].spec.fan_out != spec.fan_in {
                return Err(Error::shape(format!(
                    "layer {i}: fan_in {} does not chain to previous fan_out {}",
                    spec.fan_in,
                    layers[i - 1].spec.fan_out
                )));
            }
        }
        Ok(NetParams {
            layers,
            id: next_id(),
            generation: 0,
        })
    }

    /// All-zero parameters for the given layer stack.
    pub fn zeros(specs: &[LayerSpec]) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|&spec| Layer {
                spec,
                weight: Tensor::zeros(&[spec.fan_in, spec.fan_out]),
                bias: spec.has_bias().then(|| Tensor::zeros(&[spec.fan_out])),
            })
            .collect();
        NetParams::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    pub fn fan_in(&self) -> usize {
        self.layers[0].spec.fan_in
    }

    pub fn fan_out(&self) -> usize {
        self.layers.last().unwrap().spec.fan_out
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Mutable parameter access; invalidates outstanding traces.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        self.generation += 1;
        &mut self.layers
    }

    /// Parameter tensors in a fixed order (weight, then bias, per layer).
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers
            .iter()
            .flat_map(|l| std::iter::once(&l.weight).chain(l.bias.as_ref()))
    }

    /// Forward pass keeping every activation for [`NetParams::backward`].
    ///
    /// A rank-1 input is a single example; rank-2 is `batch × fan_in`. For an
    /// embedding front end the input holds one integer index per row.
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Trace)> {
        let (x, unbatched) = self.normalize_input(input)?;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for layer in &self.layers {
            let next = layer_forward(layer, acts.last().unwrap())?;
            acts.push(next);
        }
        let mut out = acts.last().unwrap().clone();
        if unbatched {
            out = Tensor::new(vec![out.cols()], out.into_data())?;
        }
        let trace = Trace {
            net_id: self.id,
            generation: self.generation,
            acts,
            unbatched,
        };
        Ok((out, trace))
    }

    /// Forward pass without caching intermediate activations.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let (mut x, unbatched) = self.normalize_input(input)?;
        for layer in &self.layers {
            x = layer_forward(layer, &x)?;
        }
        if unbatched {
            x = Tensor::new(vec![x.cols()], x.into_data())?;
        }
        Ok(x)
    }

    fn normalize_input(&self, input: &Tensor) -> Result<(Tensor, bool)> {
        let first = self.layers[0].spec;
        let width = match first.kind {
            LayerKind::Embedding => 1,
            LayerKind::Dense => first.fan_in,
        };
        let (rows, unbatched) = match input.rank() {
            1 => (1, true),
            2 => (input.rows(), false),
            r => return Err(Error::shape(format!("input rank {r} not supported"))),
        };
        let cols = if unbatched { input.len() } else { input.cols() };
        if cols != width {
            return Err(Error::shape(format!("input has {cols} columns, network expects {width}")));
        }
        if first.kind == LayerKind::Embedding {
            for &v in input.data() {
                if v.fract() != 0.0 || v < 0.0 || v >= first.fan_in as f64 {
                    return Err(Error::shape(format!(
                        "embedding index {v} outside 0..{}",
                        first.fan_in
                    )));
                }
            }
        }
        Ok((Tensor::matrix(rows, width, input.data().to_vec())?, unbatched))
    }

    /// Reverse-mode gradients for the trace of a previous forward call.
    ///
    /// Returns parameter gradients and, for dense-input networks, the
    /// gradient w.r.t. the input (needed to chain networks together).
    pub fn backward(&self, trace: &Trace, grad: OutputGrad<'_>) -> Result<(Grads, Option<Tensor>)> {
        if trace.net_id != self.id || trace.generation != self.generation {
            return Err(Error::StaleTrace);
        }
        let out_shape = trace.output().shape().to_vec();
        let g = match grad {
            OutputGrad::Output(t) | OutputGrad::Logits(t) => t,
        };
        if g.len() != trace.output().len() {
            return Err(Error::shape(format!(
                "output gradient has {} values, output has shape {out_shape:?}",
                g.len()
            )));
        }
        let mut upstream = Tensor::matrix(out_shape[0], out_shape[1], g.data().to_vec())?;
        let mut is_logit = matches!(grad, OutputGrad::Logits(_));
        let mut grads = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let x = &trace.acts[l];
            let a = &trace.acts[l + 1];
            let dz = if is_logit {
                upstream
            } else {
                activation_backward(layer.spec.activation, a, upstream)
            };
            is_logit = false;
            let (lg, dx) = layer_backward(layer, x, &dz, l > 0 || layer.spec.kind == LayerKind::Dense);
            grads.push(lg);
            match dx {
                Some(d) => upstream = d,
                None => {
                    upstream = Tensor::zeros(&[1]);
                }
            }
        }
        grads.reverse();
        let input_grad = match self.layers[0].spec.kind {
            LayerKind::Dense => {
                if trace.unbatched {
                    Some(Tensor::new(vec![upstream.len()], upstream.into_data())?)
                } else {
                    Some(upstream)
                }
            }
            LayerKind::Embedding => None,
        };
        Ok((Grads { layers: grads }, input_grad))
    }
}

fn layer_forward(layer: &Layer, x: &Tensor) -> Result<Tensor> {
    let spec = layer.spec;
    let rows = x.rows();
    let mut out = Tensor::zeros(&[rows, spec.fan_out]);
    match spec.kind {
        LayerKind::Embedding => {
            for (r, &idx) in x.data().iter().enumerate() {
                let idx = idx as usize;
                out.row_mut(r).copy_from_slice(layer.weight.row(idx));
            }
        }
        LayerKind::Dense => {
            if x.cols() != spec.fan_in {
                return Err(Error::shape(format!(
                    "dense layer expects {} inputs, got {}",
                    spec.fan_in,
                    x.cols()
                )));
            }
            if let Some(b) = &layer.bias {
                for r in 0..rows {
                    out.row_mut(r).copy_from_slice(b.data());
                }
            }
            let (fi, fo) = (spec.fan_in as isize, spec.fan_out as isize);
            gemm(
                rows,
                spec.fan_in,
                spec.fan_out,
                x.data(),
                (fi, 1),
                layer.weight.data(),
                (fo, 1),
                out.data_mut(),
                true,
            );
        }
    }
    apply_activation(spec.activation, &mut out);
    Ok(out)
}

fn apply_activation(act: Activation, t: &mut Tensor) {
    match act {
        Activation::Linear => {}
        Activation::Relu => t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
        Activation::Softmax => {
            for r in 0..t.rows() {
                softmax_in_place(t.row_mut(r));
            }
        }
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn activation_backward(act: Activation, a: &Tensor, mut da: Tensor) -> Tensor {
    match act {
        Activation::Linear => da,
        Activation::Relu => {
            for (g, &y) in da.data_mut().iter_mut().zip(a.data()) {
                if y <= 0.0 {
                    *g = 0.0;
                }
            }
            da
        }
        Activation::Softmax => {
            for r in 0..a.rows() {
                let p = a.row(r);
                let g = da.row_mut(r);
                let dot: f64 = p.iter().zip(g.iter()).map(|(p, g)| p * g).sum();
                for (gi, &pi) in g.iter_mut().zip(p) {
                    *gi = pi * (*gi - dot);
                }
            }
            da
        }
    }
}

fn layer_backward(layer: &Layer, x: &Tensor, dz: &Tensor, need_dx: bool) -> (LayerGrad, Option<Tensor>) {
    let spec = layer.spec;
    let rows = dz.rows();
    let mut dw = Tensor::zeros(&[spec.fan_in, spec.fan_out]);
    match spec.kind {
        LayerKind::Embedding => {
            for (r, &idx) in x.data().iter().enumerate() {
                let dst = dw.row_mut(idx as usize);
                for (d, g) in dst.iter_mut().zip(dz.row(r)) {
                    *d += g;
                }
            }
            (LayerGrad { weight: dw, bias: None }, None)
        }
        LayerKind::Dense => {
            let (fi, fo) = (spec.fan_in as isize, spec.fan_out as isize);
            // dW = xᵀ · dz
            gemm(spec.fan_in, rows, spec.fan_out, x.data(), (1, fi), dz.data(), (fo, 1), dw.data_mut(), false);
            let mut db = Tensor::zeros(&[spec.fan_out]);
            for r in 0..rows {
                for (b, g) in db.data_mut().iter_mut().zip(dz.row(r)) {
                    *b += g;
                }
            }
            let dx = need_dx.then(|| {
                // dx = dz · Wᵀ
                let mut dx = Tensor::zeros(&[rows, spec.fan_in]);
                gemm(rows, spec.fan_out, spec.fan_in, dz.data(), (fo, 1), layer.weight.data(), (1, fo), dx.data_mut(), false);
                dx
            });
            (LayerGrad { weight: dw, bias: Some(db) }, dx)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_net(w: Vec<f64>, b: Vec<f64>, fan_in: usize, fan_out: usize, act: Activation) -> NetParams {
        NetParams::new(vec![Layer {
            spec: LayerSpec::dense(fan_in, fan_out, act),
            weight: Tensor::matrix(fan_in, fan_out, w).unwrap(),
            bias: Some(Tensor::new(vec![fan_out], b).unwrap()),
        }])
        .unwrap()
    }

    #[test]
    fn identity_relu_clamps() {
        let mut w = vec![0.0; 9];
        w[0] = 1.0;
        w[4] = 1.0;
        w[8] = 1.0;
        let net = dense_net(w, vec![0.0; 3], 3, 3, Activation::Relu);
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        assert_eq!(net.infer(&x).unwrap().data(), &[1.0, 0.0, 3.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let net = dense_net(vec![0.0; 8], vec![0.3; 4], 2, 4, Activation::Softmax);
        let y = net.infer(&Tensor::new(vec![2], vec![0.7, -1.1]).unwrap()).unwrap();
        for &p in y.data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn two_by_two_linear_by_hand() {
        // y = x·W + b, W stored fan_in × fan_out.
        let w = [[1.0, 2.0], [3.0, 4.0]];
        let x = [1.0, 1.0];
        let b = [0.5, -0.5];
        let oracle: Vec<f64> = (0..2).map(|j| x[0] * w[0][j] + x[1] * w[1][j] + b[j]).collect();
        assert_eq!(oracle, vec![4.5, 5.5]);
        let net = dense_net(vec![1.0, 2.0, 3.0, 4.0], b.to_vec(), 2, 2, Activation::Linear);
        let y = net.infer(&Tensor::new(vec![2], x.to_vec()).unwrap()).unwrap();
        assert_eq!(y.data(), oracle.as_slice());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let net = dense_net(vec![0.0; 6], vec![0.0; 3], 2, 3, Activation::Linear);
        let err = net.infer(&Tensor::new(vec![3], vec![0.0; 3]).unwrap()).unwrap_err();
        assert!(err.to_string().contains("expects 2"));
    }

    #[test]
    fn stale_trace_rejected() {
        let mut net = dense_net(vec![0.1; 4], vec![0.0; 2], 2, 2, Activation::Linear);
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let (_, trace) = net.forward(&x).unwrap();
        net.layers_mut()[0].weight.data_mut()[0] = 0.5;
        let g = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        assert!(matches!(net.backward(&trace, OutputGrad::Output(&g)), Err(Error::StaleTrace)));
        let other = net.clone();
        let (_, trace) = other.forward(&x).unwrap();
        assert!(matches!(net.backward(&trace, OutputGrad::Output(&g)), Err(Error::StaleTrace)));
    }

    #[test]
    fn zero_output_gradient_gives_zero_grads() {
        let net = dense_net(vec![0.3, -0.2, 0.5, 0.9], vec![0.1, 0.2], 2, 2, Activation::Relu);
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let (_, trace) = net.forward(&x).unwrap();
        let (g, dx) = net.backward(&trace, OutputGrad::Output(&Tensor::zeros(&[2]))).unwrap();
        assert_eq!(g.norm(), 0.0);
        assert!(dx.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_chain() {
        let a = LayerSpec::dense(4, 3, Activation::Relu);
        let b = LayerSpec::dense(2, 1, Activation::Linear);
        assert!(NetParams::zeros(&[a, b]).is_err());
        let e = LayerSpec::embedding(8, 4);
        assert!(NetParams::zeros(&[a, e]).is_err());
    }
}
