use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{Element, Tensor};

/// Mean softmax cross-entropy over a `(N, C)` batch of logits.
///
/// Returns the loss and its gradient `(softmax - onehot) / N`. Computed in
/// `f64` with max-subtraction.
pub fn softmax_cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let &[n, classes] = logits.shape() else {
        return Err(shape_err!("logits must be (N, C), got {:?}", logits.shape()));
    };
    if labels.len() != n {
        return Err(shape_err!("{} labels for {n} logits rows", labels.len()));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(invalid!("label {bad} out of range for {classes} classes"));
    }
    let mut grad = Vec::with_capacity(n * classes);
    let mut total = 0f64;
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        total += sum.ln() - (row[label].to_f64() - max);
        for (c, e) in exps.iter().enumerate() {
            let onehot = if c == label { 1.0 } else { 0.0 };
            grad.push(T::from_f64((e / sum - onehot) / n as f64));
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, Tensor::new(vec![n, classes], grad)?))
}
