use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-log softmax(logits)[label]` and its gradient `softmax - onehot(label)`.
pub fn softmax_xent(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let z = logits.data();
    if label >= z.len() {
        return Err(Error::Domain(format!(
            "label {label} out of range for {} classes",
            z.len()
        )));
    }
    logits.ensure_finite("logits")?;
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    let loss = (m + log_sum - z[label]).max(0.0);
    let mut grad = softmax(z);
    grad[label] -= 1.0;
    Ok((loss, Tensor::from_vec(logits.shape(), grad)?))
}
