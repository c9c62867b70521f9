use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean cross-entropy `-ln p[label]` over the batch rows of `probs`.
///
/// `labels` are 0-based class indices, one per row.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let rows = batch_rows(probs);
    if labels.len() != rows {
        return Err(Error::Length { expected: rows, got: labels.len() });
    }
    let cols = probs.len() / rows;
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= cols {
            return Err(Error::invalid(format!("label {label} outside 0..{cols}")));
        }
        let row = &probs.data()[r * cols..(r + 1) * cols];
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("row {r} sums to {sum}, not a probability vector")));
        }
        total -= row[label].max(PROB_FLOOR).ln();
    }
    Ok(total / rows as f64)
}

/// Gradient of the mean cross-entropy w.r.t. the softmax *logits*:
/// `(p - onehot) / batch`.
pub fn softmax_cross_entropy_grad(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let rows = batch_rows(probs);
    if labels.len() != rows {
        return Err(Error::Length { expected: rows, got: labels.len() });
    }
    let cols = probs.len() / rows;
    let mut g = probs.clone();
    let scale = 1.0 / rows as f64;
    for (r, &label) in labels.iter().enumerate() {
        let row = &mut g.data_mut()[r * cols..(r + 1) * cols];
        row[label] -= 1.0;
        row.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(g)
}

fn batch_rows(t: &Tensor) -> usize {
    if t.rank() == 1 {
        1
    } else {
        t.rows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_over_256_is_ln_256() {
        let p = Tensor::new(vec![256], vec![1.0 / 256.0; 256]).unwrap();
        let l = cross_entropy(&p, &[17]).unwrap();
        assert!((l - 256f64.ln()).abs() < 1e-12);
        assert!((l - 5.545).abs() < 1e-3);
    }

    #[test]
    fn certain_prediction_has_zero_loss() {
        let p = Tensor::new(vec![3], vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(cross_entropy(&p, &[1]).unwrap(), 0.0);
    }

    #[test]
    fn hand_value() {
        let p = Tensor::new(vec![3], vec![0.7, 0.2, 0.1]).unwrap();
        let l = cross_entropy(&p, &[0]).unwrap();
        assert!((l - 0.356_674_943_938_732_4).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_floored() {
        let p = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let l = cross_entropy(&p, &[1]).unwrap();
        assert!(l.is_finite());
        assert!((l + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn fused_gradient_at_uniform() {
        let p = Tensor::new(vec![4], vec![0.25; 4]).unwrap();
        let g = softmax_cross_entropy_grad(&p, &[0]).unwrap();
        assert_eq!(g.data(), &[-0.75, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn rejects_non_probability() {
        let p = Tensor::new(vec![2], vec![0.7, 0.7]).unwrap();
        assert!(cross_entropy(&p, &[0]).is_err());
    }
}
