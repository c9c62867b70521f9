use rand::Rng;

use super::net::{Layer, LayerSpec, NetParams};
use super::tensor::Tensor;
use crate::error::Result;

/// Glorot-uniform weights, zero biases.
///
/// Weights are drawn from `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`,
/// which gives a standard deviation of `sqrt(2 / (fan_in + fan_out))`.
pub fn init_params<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<NetParams> {
    let layers = specs
        .iter()
        .map(|&spec| {
            let limit = glorot_limit(spec.fan_in, spec.fan_out);
            let w = (0..spec.fan_in * spec.fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            Ok(Layer {
                spec,
                weight: Tensor::matrix(spec.fan_in, spec.fan_out, w)?,
                bias: spec.has_bias().then(|| Tensor::zeros(&[spec.fan_out])),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    NetParams::new(layers)
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::net::Activation;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_under_seed() {
        let specs = [LayerSpec::embedding(16, 8), LayerSpec::dense(8, 4, Activation::Relu)];
        let a = init_params(&specs, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = init_params(&specs, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        let c = init_params(&specs, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn weight_spread_matches_glorot() {
        let specs = [LayerSpec::dense(256, 256, Activation::Relu)];
        let net = init_params(&specs, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let w = net.layers()[0].weight.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let sd = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = (2.0 / 512.0f64).sqrt();
        assert!((sd / target - 1.0).abs() < 0.2, "sd {sd} target {target}");
        assert!(net.layers()[0].bias.as_ref().unwrap().data().iter().all(|&b| b == 0.0));
    }
}
