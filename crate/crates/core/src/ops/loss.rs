use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &[f64], k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(k) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / z));
    }
    out
}

/// Mean over the batch of `-log softmax(logits)[label]`, plus the softmax
/// probabilities needed for backward.
pub fn softmax_cross_entropy_forward(logits: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            lhs: s.to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let k = s[1];
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::pre(format!("label {bad} out of range for {k} classes")));
    }
    let probs = softmax(logits.data(), k);
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Ok((total / labels.len() as f64, probs))
}

impl Graph {
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = softmax_cross_entropy_forward(self.value(logits), labels)?;
        let out = Tensor::from_vec(&[1], vec![loss])?;
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
        ))
    }
}
