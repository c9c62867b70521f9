use super::net::{Grads, NetParams};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam moment estimates and hyper-parameters for one network.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &NetParams, lr: f64) -> Self {
        let zeros: Vec<Tensor> = net.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Applies one bias-corrected Adam update.
///
/// A non-finite gradient leaves both parameters and state untouched.
pub fn adam_step(net: &mut NetParams, grads: &Grads, state: &mut AdamState) -> Result<()> {
    let n_params = net.tensors().count();
    let n_grads = grads.tensors().count();
    if n_params != n_grads || state.m.len() != n_params {
        return Err(Error::shape(format!(
            "adam: {n_params} parameter tensors, {n_grads} gradients, {} moments",
            state.m.len()
        )));
    }
    for (p, g) in net.tensors().zip(grads.tensors()) {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "adam: gradient shape {:?} != parameter shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
    }
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient("adam update".into()));
    }

    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);

    let grads: Vec<&Tensor> = grads.tensors().collect();
    let mut k = 0;
    for layer in net.layers_mut() {
        let params = std::iter::once(&mut layer.weight).chain(layer.bias.as_mut());
        for p in params {
            let g = grads[k].data();
            let m = state.m[k].data_mut();
            let v = state.v[k].data_mut();
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            k += 1;
        }
    }
    Ok(())
}
