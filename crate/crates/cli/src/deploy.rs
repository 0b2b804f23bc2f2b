//! Evaluation and the retrieval-style deployment classifier, which treats
//! each normalized classifier row as the embedding of its class and answers
//! with the nearest class embedding.

use anyhow::{ensure, Result};
use xclass_core::math::{dot, l2_normalize_rows, DenseMatrix, NORM_EPSILON};
use xclass_core::sim::Model;

use crate::dataset::Dataset;

fn check_width(model: &Model, x: &DenseMatrix) -> Result<()> {
    ensure!(
        x.cols() == model.extractor.input_dim(),
        "shape mismatch: queries have {} features, model expects {}",
        x.cols(),
        model.extractor.input_dim()
    );
    Ok(())
}

/// Top-1 predictions and accuracy on `ds`.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<(f64, Vec<usize>)> {
    check_width(model, &ds.features)?;
    ensure!(
        ds.num_classes <= model.num_classes(),
        "shape mismatch: dataset has {} classes, model {}",
        ds.num_classes,
        model.num_classes()
    );
    let preds = model.predict(&ds.features)?;
    Ok((accuracy(&preds, &ds.labels), preds))
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Nearest class embedding of each query by exact linear scan; ties go to
/// the lower class id.
pub fn classify_retrieval(model: &Model, queries: &DenseMatrix) -> Result<Vec<usize>> {
    check_width(model, queries)?;
    let index = l2_normalize_rows(&model.classifier, NORM_EPSILON)?;
    let emb = model.embed(queries)?;
    Ok(emb.row_iter().map(|q| nearest(&index, q)).collect())
}

fn nearest(index: &DenseMatrix, q: &[f32]) -> usize {
    let mut best = (0, f32::NEG_INFINITY);
    for (j, w) in index.row_iter().enumerate() {
        let s = dot(q, w);
        if s > best.1 {
            best = (j, s);
        }
    }
    best.0
}
