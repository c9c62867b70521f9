mod common;

use common::{check_projection, composition_error, fd_max_rel_err, probe_coords, random_tensor};
use e2e_phy::nets::PowerMode;
use e2e_phy::nn::{cross_entropy, init_params, softmax_cross_entropy_grad, Activation, LayerSpec, NetParams, OutputGrad, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LAYER_TOL: f64 = 1e-4;
const COMPOSITION_TOL: f64 = 1e-3;

#[test]
fn embedding_layer() {
    let input = Tensor::matrix(4, 1, vec![3.0, 7.0, 3.0, 0.0]).unwrap();
    let err = check_projection(&[LayerSpec::embedding(10, 6)], input, 1);
    assert!(err < LAYER_TOL, "{err}");
}

#[test]
fn dense_layers_by_activation() {
    for (k, act) in [Activation::Relu, Activation::Linear, Activation::Softmax].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(10 + k as u64);
        let input = random_tensor(5, 7, &mut rng);
        let err = check_projection(&[LayerSpec::dense(7, 6, act)], input, 20 + k as u64);
        assert!(err < LAYER_TOL, "{act:?}: {err}");
    }
}

#[test]
fn input_gradient_of_dense_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let specs = [LayerSpec::dense(6, 9, Activation::Relu), LayerSpec::dense(9, 4, Activation::Linear)];
    let net = init_params(&specs, &mut rng).unwrap();
    let x = random_tensor(3, 6, &mut rng);
    let c = random_tensor(3, 4, &mut rng);
    let (_, trace) = net.forward(&x).unwrap();
    let (_, dx) = net.backward(&trace, OutputGrad::Output(&c)).unwrap();
    let dx = dx.unwrap();
    let loss = |x: &Tensor| net.infer(x).unwrap().data().iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>();
    for i in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[i] += common::FD_STEP;
        let mut m = x.clone();
        m.data_mut()[i] -= common::FD_STEP;
        let n = (loss(&p) - loss(&m)) / (2.0 * common::FD_STEP);
        assert!(common::rel_err(dx.data()[i], n) < LAYER_TOL);
    }
}

#[test]
fn softmax_cross_entropy_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let specs = [
        LayerSpec::dense(8, 16, Activation::Relu),
        LayerSpec::dense(16, 16, Activation::Relu),
        LayerSpec::dense(16, 5, Activation::Softmax),
    ];
    let net = init_params(&specs, &mut rng).unwrap();
    let x = random_tensor(6, 8, &mut rng);
    let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..5)).collect();
    let (probs, trace) = net.forward(&x).unwrap();
    let dl = softmax_cross_entropy_grad(&probs, &labels).unwrap();
    let (g, _) = net.backward(&trace, OutputGrad::Logits(&dl)).unwrap();
    let loss = |n: &NetParams| cross_entropy(&n.infer(&x).unwrap(), &labels).unwrap();
    let err = fd_max_rel_err(&net, &g, &probe_coords(&g, 8, 24, &mut rng), loss);
    assert!(err < LAYER_TOL, "{err}");
}

#[test]
fn full_composition_amplitude_mode() {
    let err = composition_error(PowerMode::Amplitude, 5);
    assert!(err < COMPOSITION_TOL, "{err}");
}

#[test]
fn full_composition_average_power_mode() {
    let err = composition_error(PowerMode::AveragePower, 6);
    assert!(err < COMPOSITION_TOL, "{err}");
}
