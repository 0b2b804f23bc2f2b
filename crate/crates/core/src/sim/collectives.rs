//! Collective operations over per-rank values.
//!
//! Inputs are indexed by rank. Reductions always run in rank order, so every
//! worker ends up with bit-identical results, run after run.

use std::fmt::Write as _;

use crate::error::{shape_err, Error, Result};
use crate::math::softmax::{row_exp_sum, row_grad, row_loss, row_max};
use crate::math::{DenseMatrix, LossAndGrad};
use crate::sparsify::{densify, SparseGradient};

/// Communication and timing counters of one worker.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkerCounters {
    pub bytes_allgather: u64,
    pub bytes_allreduce: u64,
    pub sync_rounds: u64,
    pub overlap_ticks: u64,
    pub total_ticks: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommStats {
    pub workers: Vec<WorkerCounters>,
}

impl CommStats {
    pub fn new(num_workers: usize) -> Self {
        Self {
            workers: vec![WorkerCounters::default(); num_workers],
        }
    }

    pub fn num_workers(&self) -> usize {
        self.workers.len()
    }

    pub fn merge(&mut self, other: &CommStats) {
        for (a, b) in self.workers.iter_mut().zip(&other.workers) {
            a.bytes_allgather += b.bytes_allgather;
            a.bytes_allreduce += b.bytes_allreduce;
            a.sync_rounds += b.sync_rounds;
            a.overlap_ticks += b.overlap_ticks;
            a.total_ticks += b.total_ticks;
        }
    }

    /// Sync rounds as seen by rank 0 (all ranks take part in every round).
    pub fn sync_rounds(&self) -> u64 {
        self.workers.first().map_or(0, |w| w.sync_rounds)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("worker,bytes_allgather,bytes_allreduce,sync_rounds,overlap_ticks,total_ticks\n");
        for (r, w) in self.workers.iter().enumerate() {
            let _ = writeln!(
                out,
                "{r},{},{},{},{},{}",
                w.bytes_allgather, w.bytes_allreduce, w.sync_rounds, w.overlap_ticks, w.total_ticks
            );
        }
        out
    }
}

fn check_workers<T>(inputs: &[T], stats: &CommStats) -> Result<()> {
    if inputs.is_empty() {
        return Err(Error::InvalidConfig("collective over zero workers".into()));
    }
    if inputs.len() != stats.num_workers() {
        return Err(shape_err(format!(
            "{} inputs for {} workers",
            inputs.len(),
            stats.num_workers()
        )));
    }
    Ok(())
}

/// Every worker receives the row-wise concatenation of all inputs in rank
/// order.
pub fn all_gather(inputs: &[DenseMatrix], stats: &mut CommStats) -> Result<Vec<DenseMatrix>> {
    check_workers(inputs, stats)?;
    let shape = inputs[0].shape();
    if inputs.iter().any(|m| m.shape() != shape) {
        return Err(shape_err("all_gather inputs differ in shape"));
    }
    let peers = inputs.len() as u64 - 1;
    for (w, m) in stats.workers.iter_mut().zip(inputs) {
        w.bytes_allgather += 4 * m.as_slice().len() as u64 * peers;
    }
    let gathered = DenseMatrix::vstack(inputs)?;
    Ok(vec![gathered; inputs.len()])
}

/// Elementwise sum, accumulated `((x0 + x1) + x2) + ...`.
fn rank_order_sum<'a>(inputs: impl Iterator<Item = &'a [f32]>) -> Vec<f32> {
    let mut it = inputs;
    let mut acc = it.next().map(<[f32]>::to_vec).unwrap_or_default();
    for x in it {
        for (a, v) in acc.iter_mut().zip(x) {
            *a += v;
        }
    }
    acc
}

/// Ring all-reduce traffic per worker: `2 (P - 1) / P` of the payload.
fn ring_bytes(payload: u64, p: u64) -> u64 {
    2 * (p - 1) * payload / p
}

/// Every worker receives the elementwise sum of all inputs.
pub fn all_reduce_sum(inputs: &[DenseMatrix], stats: &mut CommStats) -> Result<Vec<DenseMatrix>> {
    check_workers(inputs, stats)?;
    let shape = inputs[0].shape();
    if inputs.iter().any(|m| m.shape() != shape) {
        return Err(shape_err("all_reduce inputs differ in shape"));
    }
    let p = inputs.len() as u64;
    for (w, m) in stats.workers.iter_mut().zip(inputs) {
        w.bytes_allreduce += ring_bytes(4 * m.as_slice().len() as u64, p);
    }
    let sum = DenseMatrix::from_vec(
        shape.0,
        shape.1,
        rank_order_sum(inputs.iter().map(DenseMatrix::as_slice)),
    )?;
    Ok(vec![sum; inputs.len()])
}

/// Flat-vector form of [`all_reduce_sum`]; returns the single shared result.
pub fn all_reduce_vec(inputs: &[&[f32]], stats: &mut CommStats) -> Result<Vec<f32>> {
    check_workers(inputs, stats)?;
    let len = inputs[0].len();
    if inputs.iter().any(|v| v.len() != len) {
        return Err(shape_err("all_reduce inputs differ in length"));
    }
    let p = inputs.len() as u64;
    for w in &mut stats.workers {
        w.bytes_allreduce += ring_bytes(4 * len as u64, p);
    }
    Ok(rank_order_sum(inputs.iter().copied()))
}

/// Sums sparse gradients by exchanging them with every peer and densifying
/// locally.
pub fn sparse_all_reduce(inputs: &[SparseGradient], stats: &mut CommStats) -> Result<Vec<f32>> {
    check_workers(inputs, stats)?;
    let len = inputs[0].dense_len;
    if inputs.iter().any(|s| s.dense_len != len || s.layer_id != inputs[0].layer_id) {
        return Err(shape_err("sparse all-reduce over different layers"));
    }
    let peers = inputs.len() as u64 - 1;
    for (w, s) in stats.workers.iter_mut().zip(inputs) {
        w.bytes_allreduce += s.wire_len() as u64 * peers;
    }
    let dense: Vec<Vec<f32>> = inputs.iter().map(densify).collect();
    Ok(rank_order_sum(dense.iter().map(Vec::as_slice)))
}

/// Small per-row scalar reduction (max or sum) used by the distributed
/// softmax.
fn scalar_reduce<T: Copy>(per_rank: &[Vec<T>], stats: &mut CommStats, op: fn(T, T) -> T) -> Vec<T> {
    let p = per_rank.len() as u64;
    let payload = (std::mem::size_of::<T>() * per_rank[0].len()) as u64;
    for w in &mut stats.workers {
        w.bytes_allreduce += ring_bytes(payload, p);
    }
    let mut acc = per_rank[0].clone();
    for r in &per_rank[1..] {
        for (a, v) in acc.iter_mut().zip(r) {
            *a = op(*a, *v);
        }
    }
    acc
}

/// Softmax cross-entropy over logits split column-wise across workers.
///
/// `labels` index the concatenated columns. Each row needs a global max and
/// a global exp-sum; both are reduced across ranks before the local gradient
/// slices are formed. Every worker receives the same loss.
pub fn distributed_softmax_xent(
    shard_logits: &[DenseMatrix],
    labels: &[usize],
    stats: &mut CommStats,
) -> Result<Vec<LossAndGrad>> {
    let rows = shard_logits.first().map_or(0, DenseMatrix::rows);
    distributed_softmax_xent_scaled(shard_logits, labels, rows, stats)
}

/// As [`distributed_softmax_xent`], but losses and gradients are divided by
/// `normalizer` instead of the row count. Micro-batches of a larger batch
/// pass the full batch size so their contributions simply add up.
pub fn distributed_softmax_xent_scaled(
    shard_logits: &[DenseMatrix],
    labels: &[usize],
    normalizer: usize,
    stats: &mut CommStats,
) -> Result<Vec<LossAndGrad>> {
    check_workers(shard_logits, stats)?;
    let rows = shard_logits[0].rows();
    if shard_logits.iter().any(|m| m.rows() != rows) || labels.len() != rows {
        return Err(shape_err("shard logits disagree on the batch size"));
    }
    let mut bounds = Vec::with_capacity(shard_logits.len() + 1);
    bounds.push(0usize);
    for m in shard_logits {
        bounds.push(bounds.last().unwrap() + m.cols());
    }
    let total_cols = *bounds.last().unwrap();
    if let Some(&bad) = labels.iter().find(|&&y| y >= total_cols) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            num_classes: total_cols,
        });
    }
    let owner = |y: usize| bounds.partition_point(|&b| b <= y) - 1;

    let local_max: Vec<Vec<f32>> = shard_logits
        .iter()
        .map(|m| (0..rows).map(|i| row_max(m.row(i))).collect())
        .collect();
    let global_max = scalar_reduce(&local_max, stats, f32::max);

    // the owner of each label contributes its logit so all ranks can form
    // the loss; piggybacks on the exp-sum reduction
    let local_sums: Vec<Vec<f64>> = shard_logits
        .iter()
        .map(|m| (0..rows).map(|i| row_exp_sum(m.row(i), global_max[i])).collect())
        .collect();
    let global_sum = scalar_reduce(&local_sums, stats, |a, b| a + b);
    let label_logits: Vec<f32> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let r = owner(y);
            shard_logits[r].get(i, y - bounds[r])
        })
        .collect();

    let inv = 1.0 / normalizer as f32;
    let mut total = 0.0f64;
    for i in 0..rows {
        total += row_loss(label_logits[i], global_max[i], global_sum[i]);
    }
    let loss = (total / normalizer as f64) as f32;

    let out = shard_logits
        .iter()
        .enumerate()
        .map(|(r, m)| {
            let mut grad = DenseMatrix::zeros(rows, m.cols());
            for (i, &y) in labels.iter().enumerate() {
                let local = (owner(y) == r).then(|| y - bounds[r]);
                row_grad(m.row(i), global_max[i], global_sum[i], local, inv, grad.row_mut(i));
            }
            LossAndGrad {
                loss,
                grad_logits: grad,
                grad_features: DenseMatrix::zeros(0, 0),
                grad_weights: DenseMatrix::zeros(0, 0),
            }
        })
        .collect();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::softmax_xent;

    fn m(rows: &[&[f32]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn gather_single_worker_is_identity() {
        let a = m(&[&[1.0, 2.0]]);
        let mut st = CommStats::new(1);
        assert_eq!(all_gather(&[a.clone()], &mut st).unwrap(), vec![a]);
        assert_eq!(st.workers[0].bytes_allgather, 0);
    }

    #[test]
    fn gather_two_workers() {
        let (a, b) = (m(&[&[1.0, 2.0]]), m(&[&[3.0, 4.0]]));
        let mut st = CommStats::new(2);
        let out = all_gather(&[a, b], &mut st).unwrap();
        let expected = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(out, vec![expected.clone(), expected]);
        assert_eq!(st.workers[0].bytes_allgather, 8);
    }

    #[test]
    fn gather_shape_mismatch() {
        let mut st = CommStats::new(2);
        assert!(matches!(
            all_gather(&[m(&[&[1.0]]), m(&[&[1.0, 2.0]])], &mut st),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn reduce_single_nonzero() {
        let t = m(&[&[1.5, -2.0], &[0.25, 4.0]]);
        let z = DenseMatrix::zeros(2, 2);
        let mut st = CommStats::new(3);
        let out = all_reduce_sum(&[z.clone(), t.clone(), z], &mut st).unwrap();
        assert!(out.iter().all(|o| *o == t));
    }

    #[test]
    fn reduce_copies_scale() {
        let t = m(&[&[1.5, -2.0, 0.125]]);
        let mut st = CommStats::new(4);
        let out = all_reduce_sum(&vec![t.clone(); 4], &mut st).unwrap();
        let mut expected = t;
        expected.scale_in_place(4.0);
        assert!(out.iter().all(|o| *o == expected));
    }

    #[test]
    fn distributed_single_worker_matches_exactly() {
        let l = m(&[&[0.3, -1.2, 2.0], &[5.0, 5.0, -3.0]]);
        let labels = [2, 0];
        let mut st = CommStats::new(1);
        let d = distributed_softmax_xent(&[l.clone()], &labels, &mut st).unwrap();
        let s = softmax_xent(&l, &labels).unwrap();
        assert_eq!(d[0].loss, s.loss);
        assert_eq!(d[0].grad_logits, s.grad_logits);
    }

    #[test]
    fn uniform_logits_over_two_shards() {
        let l = DenseMatrix::zeros(3, 5);
        let mut st = CommStats::new(2);
        let d = distributed_softmax_xent(&[l.clone(), l], &[0, 7, 9], &mut st).unwrap();
        assert!((d[0].loss - 10f32.ln()).abs() < 1e-6);
        assert_eq!(d[0].loss, d[1].loss);
    }

    #[test]
    fn label_beyond_all_shards() {
        let mut st = CommStats::new(2);
        let l = DenseMatrix::zeros(1, 2);
        assert_eq!(
            distributed_softmax_xent(&[l.clone(), l], &[4], &mut st),
            Err(Error::LabelOutOfRange {
                label: 4,
                num_classes: 4
            })
        );
    }

    #[test]
    fn empty_shard_is_harmless() {
        let a = m(&[&[1.0, 2.0]]);
        let mut st = CommStats::new(2);
        let d = distributed_softmax_xent(&[a.clone(), DenseMatrix::zeros(1, 0)], &[1], &mut st).unwrap();
        let s = softmax_xent(&a, &[1]).unwrap();
        assert_eq!(d[0].loss, s.loss);
        assert_eq!(d[0].grad_logits, s.grad_logits);
    }

    #[test]
    fn csv_export() {
        let mut st = CommStats::new(2);
        st.workers[1].sync_rounds = 3;
        let csv = st.to_csv();
        assert!(csv.starts_with("worker,bytes_allgather"));
        assert!(csv.contains("\n1,0,0,3,0,0\n"));
    }
}
