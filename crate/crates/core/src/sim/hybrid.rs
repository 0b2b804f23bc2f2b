//! One synchronous step of hybrid parallel training.
//!
//! Every worker runs a full copy of the feature extractor on its slice of the
//! global batch and owns one contiguous shard of the classifier. Per
//! micro-batch the workers gather all normalized features, score them against
//! their shard, run the softmax jointly, and merge the feature gradients back.
//! Extractor gradients are summed once per step, optionally sparsified.

use std::ops::Range;
use std::thread;

use crate::error::{shape_err, Error, Result};
use crate::knn_softmax::{cosine_backward, scaled_logits, ActiveSet, DEFAULT_LOGIT_SCALE};
use crate::math::{l2_normalize_backward, l2_normalize_rows_with_norms, DenseMatrix, Mlp, MlpCache, MlpGrads, NORM_EPSILON};
use crate::sim::collectives::{
    all_gather, all_reduce_sum, all_reduce_vec, distributed_softmax_xent_scaled, sparse_all_reduce, CommStats,
};
use crate::sim::model::{
    classifier_row_grads, layer_scale, row_norms_sq, update_classifier_rows, update_extractor, Model,
    OptimizerConfig, OptimizerState,
};
use crate::sim::pipeline::{pipeline_schedule, PipelineMode, PipelineSchedule, Stage, TickCosts};
use crate::sim::topology::WorkerTopology;
use crate::sparsify::{CompressionState, SparseGradient};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    /// All workers run on the calling thread, in rank order.
    Sequential,
    /// One scoped thread per worker for every compute stage.
    Threaded,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsifyConfig {
    /// Fraction of each extractor tensor that is *not* sent.
    pub ratio: f64,
    pub momentum: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridConfig {
    pub lr: f32,
    pub optimizer: OptimizerConfig,
    pub logit_scale: f32,
    pub micro_batches: usize,
    /// Number of chunks whose gradients are summed before one sync.
    pub accumulation: usize,
    pub pipeline: PipelineMode,
    pub costs: TickCosts,
    pub exec: ExecMode,
}

impl Default for HybridConfig {
    fn default() -> Self {
        Self {
            lr: 0.1,
            optimizer: OptimizerConfig::default(),
            logit_scale: DEFAULT_LOGIT_SCALE,
            micro_batches: 1,
            accumulation: 1,
            pipeline: PipelineMode::Overlapped,
            costs: TickCosts::default(),
            exec: ExecMode::Sequential,
        }
    }
}

/// Model and optimizer state distributed over the workers.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridState {
    topology: WorkerTopology,
    replicas: Vec<Mlp>,
    fe_velocity: Vec<Vec<Vec<f32>>>,
    compression: Option<Vec<CompressionState>>,
    fc_shards: Vec<DenseMatrix>,
    fc_velocity: Vec<DenseMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub loss: f32,
    pub stats: CommStats,
    /// Schedule of one accumulation chunk.
    pub schedule: PipelineSchedule,
    /// Fraction of extractor gradient entries that were not transmitted.
    pub achieved_sparsity: f64,
}

impl HybridState {
    pub fn new(model: &Model, topology: WorkerTopology) -> Result<Self> {
        Self::from_parts(model, &OptimizerState::zeros_like(model), topology)
    }

    pub fn from_parts(model: &Model, opt: &OptimizerState, topology: WorkerTopology) -> Result<Self> {
        if model.num_classes() != topology.num_classes() {
            return Err(shape_err(format!(
                "model has {} classes, topology {}",
                model.num_classes(),
                topology.num_classes()
            )));
        }
        if opt.fc_velocity.shape() != model.classifier.shape() || opt.fe_velocity.len() != model.extractor.tensors().len()
        {
            return Err(shape_err("optimizer state does not match the model"));
        }
        let p = topology.num_workers();
        Ok(Self {
            topology,
            replicas: vec![model.extractor.clone(); p],
            fe_velocity: vec![opt.fe_velocity.clone(); p],
            compression: None,
            fc_shards: topology.layout().split_rows(&model.classifier)?,
            fc_velocity: topology.layout().split_rows(&opt.fc_velocity)?,
        })
    }

    /// Switches extractor gradient exchange to top-k sparsification with
    /// fresh residuals on every worker.
    pub fn enable_sparsification(&mut self, cfg: SparsifyConfig) -> Result<()> {
        let lens: Vec<usize> = self.replicas[0].tensors().iter().map(|t| t.len()).collect();
        let state = CompressionState::new(&lens, cfg.ratio, cfg.momentum)?;
        self.compression = Some(vec![state; self.topology.num_workers()]);
        Ok(())
    }

    pub fn set_sparsity_ratio(&mut self, ratio: f64) -> Result<()> {
        match &mut self.compression {
            Some(states) => states.iter_mut().try_for_each(|s| s.set_sparsity_ratio(ratio)),
            None => Err(Error::InvalidConfig("sparsification is not enabled".into())),
        }
    }

    pub fn is_sparsified(&self) -> bool {
        self.compression.is_some()
    }

    pub fn topology(&self) -> &WorkerTopology {
        &self.topology
    }

    pub fn replica(&self, worker: usize) -> &Mlp {
        &self.replicas[worker]
    }

    pub fn fc_shard(&self, worker: usize) -> &DenseMatrix {
        &self.fc_shards[worker]
    }

    /// Reassembles the single-process model (extractor from rank 0).
    pub fn to_model(&self) -> Result<Model> {
        Ok(Model {
            extractor: self.replicas[0].clone(),
            classifier: DenseMatrix::vstack(&self.fc_shards)?,
        })
    }

    pub fn optimizer_state(&self) -> Result<OptimizerState> {
        Ok(OptimizerState {
            fe_velocity: self.fe_velocity[0].clone(),
            fc_velocity: DenseMatrix::vstack(&self.fc_velocity)?,
        })
    }
}

/// `len` split into `parts` consecutive ranges whose sizes differ by at most
/// one (longer ranges first).
fn split_even(start: usize, len: usize, parts: usize) -> Vec<Range<usize>> {
    let (base, extra) = (len / parts, len % parts);
    let mut out = Vec::with_capacity(parts);
    let mut s = start;
    for i in 0..parts {
        let l = base + usize::from(i < extra);
        out.push(s..s + l);
        s += l;
    }
    out
}

fn map_workers<S, T, F>(exec: ExecMode, items: &mut [S], f: F) -> Result<Vec<T>>
where
    S: Send,
    T: Send,
    F: Fn(usize, &mut S) -> Result<T> + Sync,
{
    match exec {
        ExecMode::Sequential => items.iter_mut().enumerate().map(|(r, s)| f(r, s)).collect(),
        ExecMode::Threaded => thread::scope(|scope| {
            let f = &f;
            let handles: Vec<_> = items
                .iter_mut()
                .enumerate()
                .map(|(r, s)| scope.spawn(move || f(r, s)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker thread panicked"))
                .collect()
        }),
    }
}

/// Per-worker intermediate values of one micro-batch.
struct Slot {
    cache: Option<MlpCache>,
    x_norm: DenseMatrix,
    norms: Vec<f32>,
    gathered: DenseMatrix,
    logits: DenseMatrix,
    grad_logits: DenseMatrix,
    grad_x_partial: DenseMatrix,
    grad_x_local: DenseMatrix,
    fc_grad: DenseMatrix,
    fe_grads: Option<MlpGrads>,
}

impl Slot {
    fn empty() -> Self {
        let e = || DenseMatrix::zeros(0, 0);
        Self {
            cache: None,
            x_norm: e(),
            norms: Vec::new(),
            gathered: e(),
            logits: e(),
            grad_logits: e(),
            grad_x_partial: e(),
            grad_x_local: e(),
            fc_grad: e(),
            fe_grads: None,
        }
    }
}

/// Runs one step on the global batch `x` (rows) with `labels`.
///
/// With `active` set, each shard scores only the active classes it owns and
/// only those classifier rows are updated.
pub fn train_step_hybrid(
    state: &mut HybridState,
    x: &DenseMatrix,
    labels: &[usize],
    active: Option<&ActiveSet>,
    cfg: &HybridConfig,
) -> Result<StepReport> {
    let p = state.topology.num_workers();
    let n_classes = state.topology.num_classes();
    let m = x.rows();
    if labels.len() != m {
        return Err(shape_err(format!("{} labels for {m} rows", labels.len())));
    }
    if m == 0 || m % p != 0 {
        return Err(Error::InvalidConfig(format!("batch of {m} is not divisible by {p} workers")));
    }
    let (u, n) = (cfg.micro_batches, cfg.accumulation);
    let local = m / p;
    if u == 0 || n == 0 || u * n > local {
        return Err(Error::InvalidConfig(format!(
            "{n} chunks of {u} micro-batches do not fit {local} rows per worker"
        )));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= n_classes) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: n_classes,
        });
    }

    // concatenated logit column of every label
    let label_cols: Vec<usize> = match active {
        Some(a) => labels
            .iter()
            .map(|&y| a.position(y).ok_or(Error::LabelNotActive(y)))
            .collect::<Result<_>>()?,
        None => labels.to_vec(),
    };

    // per-shard normalized weights and the columns this shard scores
    let mut shard_norm = Vec::with_capacity(p);
    let mut shard_cols = Vec::with_capacity(p);
    let mut shard_active = Vec::with_capacity(p);
    for r in 0..p {
        let owned = state.topology.owned_classes(r);
        let cols: Vec<usize> = match active {
            Some(a) => a
                .class_indices()
                .iter()
                .filter(|c| owned.contains(c))
                .map(|c| c - owned.start)
                .collect(),
            None => (0..owned.len()).collect(),
        };
        let (wn, norms) = l2_normalize_rows_with_norms(&state.fc_shards[r], NORM_EPSILON)?;
        shard_active.push(wn.gather_rows(&cols)?);
        shard_norm.push((wn, norms));
        shard_cols.push(cols);
    }

    // micro-batch row ranges within each worker's slice
    let micro: Vec<Range<usize>> = split_even(0, local, n)
        .into_iter()
        .flat_map(|chunk| split_even(chunk.start, chunk.len(), u))
        .collect();

    let (schedule, tick_stats) = pipeline_schedule(p, u, &cfg.costs, cfg.pipeline)?;
    let order = schedule.task_order();
    let mut stats = CommStats::new(p);
    let mut slots: Vec<Vec<Slot>> = (0..p).map(|_| micro.iter().map(|_| Slot::empty()).collect()).collect();
    let mut micro_loss = vec![0.0f32; micro.len()];
    let replicas = &state.replicas;
    let scale = cfg.logit_scale;

    for chunk in 0..n {
        for &(stage, j) in &order {
            let g = chunk * u + j;
            let rows = micro[g].clone();
            match stage {
                Stage::FeFwd => {
                    map_workers(cfg.exec, &mut slots, |r, ws| {
                        let idx: Vec<usize> = rows.clone().map(|i| r * local + i).collect();
                        let (f, cache) = replicas[r].forward(&x.gather_rows(&idx)?)?;
                        let (xn, norms) = l2_normalize_rows_with_norms(&f, NORM_EPSILON)?;
                        let s = &mut ws[g];
                        s.cache = Some(cache);
                        s.x_norm = xn;
                        s.norms = norms;
                        Ok(())
                    })?;
                }
                Stage::Gather => {
                    let parts: Vec<DenseMatrix> = slots.iter().map(|ws| ws[g].x_norm.clone()).collect();
                    let out = all_gather(&parts, &mut stats)?;
                    for (ws, o) in slots.iter_mut().zip(out) {
                        ws[g].gathered = o;
                    }
                }
                Stage::FcFwd => {
                    let wa = &shard_active;
                    map_workers(cfg.exec, &mut slots, |r, ws| {
                        ws[g].logits = scaled_logits(&ws[g].gathered, &wa[r], scale)?;
                        Ok(())
                    })?;
                }
                Stage::Softmax => {
                    let logits: Vec<DenseMatrix> =
                        slots.iter_mut().map(|ws| std::mem::replace(&mut ws[g].logits, DenseMatrix::zeros(0, 0))).collect();
                    let cols: Vec<usize> = (0..p)
                        .flat_map(|r| rows.clone().map(move |i| r * local + i))
                        .map(|i| label_cols[i])
                        .collect();
                    let out = distributed_softmax_xent_scaled(&logits, &cols, m, &mut stats)?;
                    micro_loss[g] = out[0].loss;
                    for (ws, o) in slots.iter_mut().zip(out) {
                        ws[g].grad_logits = o.grad_logits;
                    }
                }
                Stage::FcBwd => {
                    let wa = &shard_active;
                    map_workers(cfg.exec, &mut slots, |r, ws| {
                        let s = &mut ws[g];
                        let (gx, gw) = cosine_backward(&s.gathered, &wa[r], &s.grad_logits, scale)?;
                        s.grad_x_partial = gx;
                        s.fc_grad = gw;
                        Ok(())
                    })?;
                }
                Stage::Reduce => {
                    // every shard contributes to every row; sum the partials,
                    // then each worker keeps its own rows
                    let partials: Vec<DenseMatrix> = slots.iter().map(|ws| ws[g].grad_x_partial.clone()).collect();
                    let summed = all_reduce_sum(&partials, &mut stats)?;
                    let b = rows.len();
                    for (r, (ws, s)) in slots.iter_mut().zip(summed).enumerate() {
                        ws[g].grad_x_local = s.row_block(r * b, (r + 1) * b);
                        ws[g].grad_x_partial = DenseMatrix::zeros(0, 0);
                    }
                }
                Stage::FeBwd => {
                    map_workers(cfg.exec, &mut slots, |r, ws| {
                        let s = &mut ws[g];
                        let gf = l2_normalize_backward(&s.x_norm, &s.norms, &s.grad_x_local)?;
                        let cache = s.cache.take().expect("forward ran before backward");
                        let (grads, _) = replicas[r].backward(&cache, &gf)?;
                        s.fe_grads = Some(grads);
                        s.gathered = DenseMatrix::zeros(0, 0);
                        Ok(())
                    })?;
                }
            }
        }
        stats.merge(&tick_stats);
    }

    let mut loss = 0.0f32;
    for l in &micro_loss {
        loss += l;
    }

    // sum per-micro-batch gradients in index order, whatever the schedule
    let mut fe_sums = Vec::with_capacity(p);
    let mut fc_sums = Vec::with_capacity(p);
    for ws in &mut slots {
        let mut it = ws.iter_mut();
        let first = it.next().expect("at least one micro-batch");
        let mut fe = first.fe_grads.take().expect("backward ran");
        let mut fc = std::mem::replace(&mut first.fc_grad, DenseMatrix::zeros(0, 0));
        for s in it {
            fe.add_assign(s.fe_grads.as_ref().expect("backward ran"))?;
            fc.add_assign(&s.fc_grad)?;
        }
        fe_sums.push(fe);
        fc_sums.push(fc);
    }

    // extractor gradient exchange: one sync round per step
    let num_tensors = state.replicas[0].tensors().len();
    let mut summed: Vec<Vec<f32>> = Vec::with_capacity(num_tensors);
    let mut sent = 0usize;
    let mut total = 0usize;
    for t in 0..num_tensors {
        let per_worker: Vec<&[f32]> = fe_sums.iter().map(|g| g.tensors()[t]).collect();
        total += p * per_worker[0].len();
        match &mut state.compression {
            Some(states) => {
                let sparse: Vec<SparseGradient> = states
                    .iter_mut()
                    .zip(&per_worker)
                    .map(|(cs, g)| cs.compress_step(t as u32, g))
                    .collect::<Result<_>>()?;
                sent += sparse.iter().map(SparseGradient::nnz).sum::<usize>();
                summed.push(sparse_all_reduce(&sparse, &mut stats)?);
            }
            None => {
                sent += p * per_worker[0].len();
                summed.push(all_reduce_vec(&per_worker, &mut stats)?);
            }
        }
    }
    for w in &mut stats.workers {
        w.sync_rounds += 1;
    }
    let achieved_sparsity = 1.0 - sent as f64 / total as f64;

    // with sparsification the momentum already lives in the compression state
    let fe_momentum = if state.compression.is_some() { 0.0 } else { cfg.optimizer.momentum };
    let grads: Vec<&[f32]> = summed.iter().map(Vec::as_slice).collect();
    let mut pairs: Vec<(&mut Mlp, &mut Vec<Vec<f32>>)> =
        state.replicas.iter_mut().zip(state.fe_velocity.iter_mut()).collect();
    map_workers(cfg.exec, &mut pairs, |_, (net, vel)| {
        update_extractor(net, vel, &grads, cfg.lr, &cfg.optimizer, fe_momentum)
    })?;

    // classifier: local update of the scored rows on each shard
    let raw: Vec<DenseMatrix> = (0..p)
        .map(|r| classifier_row_grads(&shard_norm[r].0, &shard_norm[r].1, &shard_cols[r], &fc_sums[r]))
        .collect();
    let fc_scale = if cfg.optimizer.lars.is_some() {
        let partial: Vec<Vec<f32>> = (0..p)
            .map(|r| {
                let (w, g) = row_norms_sq(&state.fc_shards[r], &shard_cols[r], &raw[r]);
                vec![w, g]
            })
            .collect();
        let refs: Vec<&[f32]> = partial.iter().map(Vec::as_slice).collect();
        let sq = all_reduce_vec(&refs, &mut stats)?;
        layer_scale(&cfg.optimizer, sq[0], sq[1])
    } else {
        1.0
    };
    for r in 0..p {
        update_classifier_rows(
            &mut state.fc_shards[r],
            &mut state.fc_velocity[r],
            &shard_cols[r],
            &raw[r],
            cfg.lr,
            &cfg.optimizer,
            fc_scale,
        )?;
    }

    Ok(StepReport {
        loss,
        stats,
        schedule,
        achieved_sparsity,
    })
}
