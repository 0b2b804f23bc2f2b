//! Single-process model, optimizer state and the reference training step
//! that the hybrid simulator is checked against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::fccs::{lars_local_lr, sgd_momentum_step, LarsConfig};
use crate::knn_softmax::{full_softmax_forward_backward, knn_softmax_forward_backward, ActiveSet};
use crate::math::matrix::{l2_normalize_backward_row, sum_of_squares};
use crate::math::{
    l2_normalize_backward, l2_normalize_rows, l2_normalize_rows_with_norms, matmul, Activation, DenseMatrix, Mlp,
    NORM_EPSILON,
};

/// Feature extractor plus the cosine classifier (one raw weight row per
/// class; rows are normalized on use).
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub extractor: Mlp,
    pub classifier: DenseMatrix,
}

impl Model {
    pub fn new(sizes: &[usize], activation: Activation, num_classes: usize, seed: u64) -> Result<Self> {
        let extractor = Mlp::new(sizes, activation, seed)?;
        let d = extractor.output_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c1a5);
        let data = (0..num_classes * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Ok(Self {
            extractor,
            classifier: DenseMatrix::from_vec(num_classes, d, data)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.rows()
    }

    /// Unit-norm embeddings of `x`.
    pub fn embed(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        l2_normalize_rows(&self.extractor.features(x)?, NORM_EPSILON)
    }

    /// Unscaled cosine similarity of every sample to every class.
    pub fn cosine_scores(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        let w = l2_normalize_rows(&self.classifier, NORM_EPSILON)?;
        matmul(&self.embed(x)?, &w, true)
    }

    /// Top-1 class per row; ties go to the lower class index.
    pub fn predict(&self, x: &DenseMatrix) -> Result<Vec<usize>> {
        let scores = self.cosine_scores(x)?;
        Ok(scores.row_iter().map(argmax).collect())
    }
}

pub(crate) fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub momentum: f32,
    pub weight_decay: f32,
    /// Layer-wise rate scaling; `None` means plain momentum SGD.
    pub lars: Option<LarsConfig>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 0.0,
            lars: None,
        }
    }
}

/// Momentum buffers: one per extractor tensor plus one for the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub fe_velocity: Vec<Vec<f32>>,
    pub fc_velocity: DenseMatrix,
}

impl OptimizerState {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            fe_velocity: model.extractor.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
            fc_velocity: DenseMatrix::zeros(model.classifier.rows(), model.classifier.cols()),
        }
    }
}

/// Rate multiplier for one layer given squared norms.
pub(crate) fn layer_scale(opt: &OptimizerConfig, w_sq: f32, g_sq: f32) -> f32 {
    match &opt.lars {
        Some(cfg) => lars_local_lr(cfg, w_sq.sqrt(), g_sq.sqrt()),
        None => 1.0,
    }
}

/// Momentum step with the gradient and weight decay scaled by `scale`.
pub(crate) fn scaled_step(
    params: &mut [f32],
    velocity: &mut [f32],
    grad: &[f32],
    lr: f32,
    momentum: f32,
    weight_decay: f32,
    scale: f32,
) -> Result<()> {
    let g: Vec<f32> = grad.iter().map(|v| v * scale).collect();
    sgd_momentum_step(params, velocity, &g, lr, momentum, weight_decay * scale)
}

/// Updates the extractor from a summed gradient, one tensor at a time.
pub(crate) fn update_extractor(
    net: &mut Mlp,
    velocity: &mut [Vec<f32>],
    grads: &[&[f32]],
    lr: f32,
    opt: &OptimizerConfig,
    momentum: f32,
) -> Result<()> {
    let tensors = net.tensors_mut();
    if tensors.len() != grads.len() || tensors.len() != velocity.len() {
        return Err(shape_err("extractor gradient does not match the network"));
    }
    for ((p, v), g) in tensors.into_iter().zip(velocity.iter_mut()).zip(grads) {
        let s = layer_scale(opt, sum_of_squares(p), sum_of_squares(g));
        scaled_step(p, v, g, lr, momentum, opt.weight_decay, s)?;
    }
    Ok(())
}

/// Gradient with respect to the raw classifier rows in `rows`, given the
/// gradient with respect to their normalized form (`grad_norm` row `i`
/// belongs to `rows[i]`).
pub(crate) fn classifier_row_grads(
    w_norm: &DenseMatrix,
    norms: &[f32],
    rows: &[usize],
    grad_norm: &DenseMatrix,
) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(rows.len(), w_norm.cols());
    for (i, &r) in rows.iter().enumerate() {
        l2_normalize_backward_row(w_norm.row(r), norms[r], grad_norm.row(i), out.row_mut(i));
    }
    out
}

/// Squared norms of the listed weight rows and of their gradient rows.
pub(crate) fn row_norms_sq(w: &DenseMatrix, rows: &[usize], grads: &DenseMatrix) -> (f32, f32) {
    let mut w_sq = 0.0f32;
    let mut g_sq = 0.0f32;
    for (i, &r) in rows.iter().enumerate() {
        w_sq += sum_of_squares(w.row(r));
        g_sq += sum_of_squares(grads.row(i));
    }
    (w_sq, g_sq)
}

pub(crate) fn update_classifier_rows(
    w: &mut DenseMatrix,
    velocity: &mut DenseMatrix,
    rows: &[usize],
    grads: &DenseMatrix,
    lr: f32,
    opt: &OptimizerConfig,
    scale: f32,
) -> Result<()> {
    for (i, &r) in rows.iter().enumerate() {
        scaled_step(
            w.row_mut(r),
            velocity.row_mut(r),
            grads.row(i),
            lr,
            opt.momentum,
            opt.weight_decay,
            scale,
        )?;
    }
    Ok(())
}

/// One synchronous step on a single process. With `active` set, only those
/// classifier rows take part and only those rows are updated.
#[allow(clippy::too_many_arguments)]
pub fn reference_step(
    model: &mut Model,
    state: &mut OptimizerState,
    x: &DenseMatrix,
    labels: &[usize],
    active: Option<&ActiveSet>,
    lr: f32,
    opt: &OptimizerConfig,
    logit_scale: f32,
) -> Result<f32> {
    let (features, cache) = model.extractor.forward(x)?;
    let (x_norm, x_norms) = l2_normalize_rows_with_norms(&features, NORM_EPSILON)?;
    let (w_norm, w_norms) = l2_normalize_rows_with_norms(&model.classifier, NORM_EPSILON)?;
    let out = match active {
        Some(a) => knn_softmax_forward_backward(&x_norm, &w_norm, labels, a, logit_scale)?,
        None => full_softmax_forward_backward(&x_norm, &w_norm, labels, logit_scale)?,
    };

    let grad_features = l2_normalize_backward(&x_norm, &x_norms, &out.grad_features)?;
    let (fe_grads, _) = model.extractor.backward(&cache, &grad_features)?;

    let rows: Vec<usize> = match active {
        Some(a) => a.class_indices().to_vec(),
        None => (0..model.num_classes()).collect(),
    };
    let grad_active = out.grad_weights.gather_rows(&rows)?;
    let fc_grads = classifier_row_grads(&w_norm, &w_norms, &rows, &grad_active);

    update_extractor(
        &mut model.extractor,
        &mut state.fe_velocity,
        &fe_grads.tensors(),
        lr,
        opt,
        opt.momentum,
    )?;
    let (w_sq, g_sq) = row_norms_sq(&model.classifier, &rows, &fc_grads);
    let s = layer_scale(opt, w_sq, g_sq);
    update_classifier_rows(
        &mut model.classifier,
        &mut state.fc_velocity,
        &rows,
        &fc_grads,
        lr,
        opt,
        s,
    )?;
    Ok(out.loss)
}
