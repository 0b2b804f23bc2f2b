//! Dense linear algebra, normalization, softmax cross-entropy and the
//! feature-extractor network.

pub mod fc;
pub mod matrix;
pub mod mlp;
pub mod softmax;

pub use fc::{fc_forward_backward, FcPass};
pub use matrix::{
    dot, l2_normalize_backward, l2_normalize_rows, l2_normalize_rows_with_norms, matmul,
    matmul_tn, DenseMatrix, NORM_EPSILON,
};
pub use mlp::{Activation, Mlp, MlpCache, MlpGrads};
pub use softmax::{softmax_row, softmax_xent, LossAndGrad};

/// Mini-batch features with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub features: DenseMatrix,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(features: DenseMatrix, labels: Vec<usize>, num_classes: usize) -> crate::Result<Self> {
        if features.rows() != labels.len() {
            return Err(crate::Error::ShapeMismatch(format!(
                "{} labels for {} rows",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(crate::Error::LabelOutOfRange { label, num_classes });
        }
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
