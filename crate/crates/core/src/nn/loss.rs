use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy and its gradient `(softmax − onehot) / N`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f32, Tensor)> {
    let [n, c] = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Length {
            got: labels.len(),
            expected: n,
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Label { label, classes: c });
    }
    let mut grad = vec![0.0f32; n * c];
    let mut total = 0.0f64;
    for ((row, g), &label) in logits.data().chunks_exact(c).zip(grad.chunks_exact_mut(c)).zip(labels) {
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0f32;
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - max).exp();
            sum += *gi;
        }
        total += (sum.ln() - (row[label] - max)) as f64;
        for gi in g.iter_mut() {
            *gi /= sum * n as f32;
        }
        g[label] -= 1.0 / n as f32;
    }
    Ok(((total / n as f64) as f32, Tensor::from_raw(vec![n, c], grad)))
}
