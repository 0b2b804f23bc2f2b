//! Graph-based active-class selection and the softmax restricted to it.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::knn::{CompressedKnnGraph, KnnGraph};
use crate::math::{matmul, matmul_tn, softmax_xent, DenseMatrix, LossAndGrad};

/// Default multiplier applied to cosine logits.
pub const DEFAULT_LOGIT_SCALE: f32 = 30.0;

/// Classes that take part in one mini-batch's softmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    class_indices: Vec<usize>,
    contains_all_labels: bool,
}

impl ActiveSet {
    /// Every class in `0..n`.
    pub fn all(n: usize) -> Self {
        Self {
            class_indices: (0..n).collect(),
            contains_all_labels: true,
        }
    }

    /// Builds a set from arbitrary class ids; duplicates are dropped.
    pub fn from_classes(mut classes: Vec<usize>, labels: &[usize]) -> Self {
        classes.sort_unstable();
        classes.dedup();
        let contains_all_labels = labels.iter().all(|y| classes.binary_search(y).is_ok());
        Self {
            class_indices: classes,
            contains_all_labels,
        }
    }

    pub fn class_indices(&self) -> &[usize] {
        &self.class_indices
    }

    pub fn contains_all_labels(&self) -> bool {
        self.contains_all_labels
    }

    pub fn len(&self) -> usize {
        self.class_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_indices.is_empty()
    }

    /// Column of `class` inside the active subspace.
    pub fn position(&self, class: usize) -> Option<usize> {
        self.class_indices.binary_search(&class).ok()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.position(class).is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionConfig {
    pub m_active: usize,
    pub rng_seed: u64,
}

/// Ordered neighbor lists a selection can draw from.
pub trait NeighborLists {
    fn num_classes(&self) -> usize;
    /// Neighbors of `class`, best first.
    fn list(&self, class: usize) -> Result<&[u32]>;
}

impl NeighborLists for KnnGraph {
    fn num_classes(&self) -> usize {
        KnnGraph::num_classes(self)
    }

    fn list(&self, class: usize) -> Result<&[u32]> {
        if class >= KnnGraph::num_classes(self) {
            return Err(Error::LabelOutOfRange {
                label: class,
                num_classes: KnnGraph::num_classes(self),
            });
        }
        Ok(self.neighbors(class))
    }
}

/// A compressed shard ranks its retained neighbors by their order in the
/// shard's list. With a single shard this is the full graph.
impl NeighborLists for CompressedKnnGraph {
    fn num_classes(&self) -> usize {
        CompressedKnnGraph::num_classes(self)
    }

    fn list(&self, class: usize) -> Result<&[u32]> {
        self.neighbors(class)
    }
}

/// Merges the neighbor lists of the batch labels into an active set of
/// exactly `m_active` classes (or fewer if the whole class space is smaller).
///
/// If the deduplicated pool is too small it is padded with classes drawn
/// uniformly from the rest; if it is too large the candidates with the best
/// rank (smallest position in any list) win, then those appearing in more
/// lists, then lower class ids. Batch labels always stay.
pub fn select_active_classes<G: NeighborLists + ?Sized>(
    graph: &G,
    labels: &[usize],
    cfg: &SelectionConfig,
    n_total: usize,
) -> Result<ActiveSet> {
    if graph.num_classes() != n_total {
        return Err(shape_err(format!(
            "graph covers {} classes, expected {n_total}",
            graph.num_classes()
        )));
    }
    if cfg.m_active > n_total {
        return Err(Error::MTooLarge {
            m: cfg.m_active,
            n: n_total,
        });
    }
    // class -> (best rank, occurrences)
    let mut pool: HashMap<usize, (usize, usize)> = HashMap::new();
    let mut distinct_labels = Vec::new();
    for &y in labels {
        if y >= n_total {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes: n_total,
            });
        }
        distinct_labels.push(y);
        for (rank, &c) in graph.list(y)?.iter().enumerate() {
            let e = pool.entry(c as usize).or_insert((rank, 0));
            e.0 = e.0.min(rank);
            e.1 += 1;
        }
    }
    distinct_labels.sort_unstable();
    distinct_labels.dedup();
    if cfg.m_active < distinct_labels.len() {
        return Err(Error::MTooSmall {
            m: cfg.m_active,
            labels: distinct_labels.len(),
        });
    }
    for &y in &distinct_labels {
        // a label is its own first neighbor; enforce it for sources that
        // might not list it
        pool.entry(y).or_insert((0, 1)).0 = 0;
    }

    let m = cfg.m_active;
    let mut chosen: Vec<usize>;
    if pool.len() > m {
        let mut ranked: Vec<(usize, usize, usize)> = pool
            .into_iter()
            .map(|(c, (rank, count))| (c, rank, count))
            .collect();
        ranked.sort_unstable_by(|a, b| {
            let a_label = distinct_labels.binary_search(&a.0).is_ok();
            let b_label = distinct_labels.binary_search(&b.0).is_ok();
            b_label
                .cmp(&a_label)
                .then(a.1.cmp(&b.1))
                .then(b.2.cmp(&a.2))
                .then(a.0.cmp(&b.0))
        });
        chosen = ranked.into_iter().take(m).map(|(c, _, _)| c).collect();
    } else {
        chosen = pool.into_keys().collect();
        chosen.sort_unstable();
        let missing = m - chosen.len();
        if missing > 0 {
            let complement: Vec<usize> = (0..n_total)
                .filter(|c| chosen.binary_search(c).is_err())
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            let picks = sample(&mut rng, complement.len(), missing);
            chosen.extend(picks.into_iter().map(|i| complement[i]));
        }
    }
    Ok(ActiveSet::from_classes(chosen, labels))
}

pub(crate) fn scaled_logits(x_norm: &DenseMatrix, w: &DenseMatrix, scale: f32) -> Result<DenseMatrix> {
    let mut logits = matmul(x_norm, w, true)?;
    logits.scale_in_place(scale);
    Ok(logits)
}

/// Gradients of `loss(scale * x wᵀ)` with respect to `x` and `w` given the
/// logit gradient.
pub(crate) fn cosine_backward(
    x_norm: &DenseMatrix,
    w: &DenseMatrix,
    grad_logits: &DenseMatrix,
    scale: f32,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let mut g = grad_logits.clone();
    g.scale_in_place(scale);
    let grad_x = matmul(&g, w, false)?;
    let grad_w = matmul_tn(&g, x_norm)?;
    Ok((grad_x, grad_w))
}

/// Softmax cross-entropy over the active classes only.
///
/// `grad_logits` lives in the active subspace (`m x |active|`), while
/// `grad_weights` is full size with zero rows outside the active set.
pub fn knn_softmax_forward_backward(
    x_norm: &DenseMatrix,
    w_norm: &DenseMatrix,
    labels: &[usize],
    active: &ActiveSet,
    scale: f32,
) -> Result<LossAndGrad> {
    if x_norm.cols() != w_norm.cols() {
        return Err(shape_err("features and class weights differ in width"));
    }
    let remapped = labels
        .iter()
        .map(|&y| active.position(y).ok_or(Error::LabelNotActive(y)))
        .collect::<Result<Vec<_>>>()?;
    let w_active = w_norm.gather_rows(active.class_indices())?;
    let logits = scaled_logits(x_norm, &w_active, scale)?;
    let mut out = softmax_xent(&logits, &remapped)?;
    let (grad_x, grad_active) = cosine_backward(x_norm, &w_active, &out.grad_logits, scale)?;
    let mut grad_w = DenseMatrix::zeros(w_norm.rows(), w_norm.cols());
    for (local, &class) in active.class_indices().iter().enumerate() {
        grad_w.row_mut(class).copy_from_slice(grad_active.row(local));
    }
    out.grad_features = grad_x;
    out.grad_weights = grad_w;
    Ok(out)
}

/// Softmax cross-entropy over every class.
pub fn full_softmax_forward_backward(
    x_norm: &DenseMatrix,
    w_norm: &DenseMatrix,
    labels: &[usize],
    scale: f32,
) -> Result<LossAndGrad> {
    if x_norm.cols() != w_norm.cols() {
        return Err(shape_err("features and class weights differ in width"));
    }
    let logits = scaled_logits(x_norm, w_norm, scale)?;
    let mut out = softmax_xent(&logits, labels)?;
    let (grad_x, grad_w) = cosine_backward(x_norm, w_norm, &out.grad_logits, scale)?;
    out.grad_features = grad_x;
    out.grad_weights = grad_w;
    Ok(out)
}
