use crate::error::{shape_err, Error, Result};
use crate::math::matrix::DenseMatrix;

/// Mean loss plus gradients for the logits and, where the caller computed
/// them, for the features and class weights feeding those logits.
///
/// Gradients a routine does not produce are left as empty `0 x 0` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f32,
    pub grad_logits: DenseMatrix,
    pub grad_features: DenseMatrix,
    pub grad_weights: DenseMatrix,
}

/// Row maximum, scanned left to right.
#[inline]
pub(crate) fn row_max(row: &[f32]) -> f32 {
    row.iter().copied().fold(f32::NEG_INFINITY, f32::max)
}

/// `Σ exp(x - max)`, accumulated in double precision so that splitting the
/// sum across shards does not change the rounded result.
#[inline]
pub(crate) fn row_exp_sum(row: &[f32], max: f32) -> f64 {
    let mut s = 0.0f64;
    for &v in row {
        s += f64::from((v - max).exp());
    }
    s
}

/// Per-sample loss given the row statistics.
#[inline]
pub(crate) fn row_loss(label_logit: f32, max: f32, exp_sum: f64) -> f64 {
    exp_sum.ln() - f64::from(label_logit - max)
}

/// Writes `(softmax(row) - onehot) * inv_batch` into `out`.
#[inline]
pub(crate) fn row_grad(
    row: &[f32],
    max: f32,
    exp_sum: f64,
    label_col: Option<usize>,
    inv_batch: f32,
    out: &mut [f32],
) {
    let inv_sum = (1.0 / exp_sum) as f32;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp() * inv_sum * inv_batch;
    }
    if let Some(c) = label_col {
        out[c] -= inv_batch;
    }
}

/// Softmax probabilities of a single row.
pub fn softmax_row(row: &[f32]) -> Vec<f32> {
    let max = row_max(row);
    let s = row_exp_sum(row, max) as f32;
    row.iter().map(|v| (v - max).exp() / s).collect()
}

/// Numerically stable mean softmax cross-entropy over a batch of logits.
pub fn softmax_xent(logits: &DenseMatrix, labels: &[usize]) -> Result<LossAndGrad> {
    let (m, c) = logits.shape();
    if labels.len() != m {
        return Err(shape_err(format!("{} labels for {m} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: c,
        });
    }
    let inv_batch = 1.0 / m as f32;
    let mut grad = DenseMatrix::zeros(m, c);
    let mut total = 0.0f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row_max(row);
        let s = row_exp_sum(row, max);
        total += row_loss(row[y], max, s);
        row_grad(row, max, s, Some(y), inv_batch, grad.row_mut(i));
    }
    Ok(LossAndGrad {
        loss: (total / m as f64) as f32,
        grad_logits: grad,
        grad_features: DenseMatrix::zeros(0, 0),
        grad_weights: DenseMatrix::zeros(0, 0),
    })
}
