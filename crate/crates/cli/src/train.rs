//! End-to-end training driver: schedule, per-epoch graph rebuilds, active
//! class selection, hybrid steps and metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xclass_core::fccs::{schedule_table, steps_per_epoch, LarsConfig, ScheduleRow};
use xclass_core::knn::{build_graph_bruteforce, build_graph_ring, KnnGraph};
use xclass_core::knn_softmax::{select_active_classes, SelectionConfig};
use xclass_core::math::{l2_normalize_rows, Activation, NORM_EPSILON};
use xclass_core::sim::{
    train_step_hybrid, CommStats, HybridConfig, HybridState, Model, OptimizerConfig, PipelineSchedule,
    SparsifyConfig, WorkerTopology,
};
use xclass_core::sparsify::SparsityWarmup;

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::config::{ExperimentConfig, OptimizerKind, ScheduleKind, SoftmaxMode};
use crate::dataset::{generate_synthetic, read_dataset, Dataset, SyntheticSpec};
use crate::deploy::evaluate;

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss: f32,
    pub lr: f64,
    pub batch_size: usize,
    pub achieved_sparsity: f64,
    pub sync_rounds: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub test_accuracy: f64,
    pub graph_rebuild_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub steps: Vec<StepMetrics>,
    pub epochs: Vec<EpochMetrics>,
}

impl RunMetrics {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,epoch,loss,lr,batch_size,achieved_sparsity,sync_rounds\n");
        for m in &self.steps {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                m.step, m.epoch, m.loss, m.lr, m.batch_size, m.achieved_sparsity, m.sync_rounds
            );
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,test_accuracy,graph_rebuild_ms\n");
        for m in &self.epochs {
            let _ = writeln!(s, "{},{},{:.3}", m.epoch, m.test_accuracy, m.graph_rebuild_ms);
        }
        s
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_accuracy)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: RunMetrics,
    pub comm: CommStats,
    /// Pipeline schedule of the last step.
    pub last_schedule: Option<PipelineSchedule>,
    pub config_hash: u64,
}

/// Loads the configured dataset files, or generates the synthetic benchmark.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match (&cfg.train_data, &cfg.test_data) {
        (Some(tr), Some(te)) => {
            let train = read_dataset(tr)?;
            let test = read_dataset(te)?;
            ensure!(
                train.dim() == test.dim(),
                "train and test feature widths differ ({} vs {})",
                train.dim(),
                test.dim()
            );
            Ok((train, test))
        }
        (None, None) => generate_synthetic(&synthetic_spec(cfg), cfg.data_seed),
        _ => anyhow::bail!("set both `train_data` and `test_data`, or neither"),
    }
}

pub fn synthetic_spec(cfg: &ExperimentConfig) -> SyntheticSpec {
    SyntheticSpec {
        classes: cfg.classes,
        train_per_class: cfg.train_per_class,
        test_per_class: cfg.test_per_class,
        dim: cfg.dim,
        spread: cfg.spread,
    }
}

/// Every optimizer step of the run as prescribed by the schedule, before
/// any adjustment to the worker count.
pub fn plan_steps(cfg: &ExperimentConfig, train_size: usize) -> Result<Vec<ScheduleRow>> {
    match cfg.schedule {
        ScheduleKind::Fccs => Ok(schedule_table(&cfg.fccs()?, train_size, cfg.epochs)),
        ScheduleKind::Piecewise => {
            let n = steps_per_epoch(train_size, cfg.batch);
            let mut rows = Vec::with_capacity(n * cfg.epochs);
            for epoch in 0..cfg.epochs {
                let decays = cfg.decay_epochs.iter().filter(|&&d| d <= epoch).count();
                let base = cfg.lr * cfg.decay_factor.powi(decays as i32);
                for j in 0..n {
                    let t = epoch as f64 + j as f64 / n as f64;
                    let lr = if t < cfg.warmup_epochs {
                        t / cfg.warmup_epochs * base
                    } else {
                        base
                    };
                    rows.push(ScheduleRow {
                        step: rows.len(),
                        epoch,
                        t,
                        lr,
                        batch_size: cfg.batch,
                    });
                }
            }
            Ok(rows)
        }
    }
}

/// Largest multiple of `p` not above `b` (at least `p`), capped by the data.
fn worker_batch(b: usize, p: usize, train_size: usize) -> usize {
    let b = b.min(train_size);
    (b - b % p).max(p)
}

fn build_graph(model: &Model, k: usize, kprime: usize, topology: &WorkerTopology) -> Result<KnnGraph> {
    let w = l2_normalize_rows(&model.classifier, NORM_EPSILON)?;
    let g = if topology.num_workers() == 1 {
        build_graph_bruteforce(&w, k)?
    } else {
        build_graph_ring(&topology.layout().split_rows(&w)?, k, kprime.max(k))?
    };
    Ok(g)
}

pub fn hybrid_config(cfg: &ExperimentConfig) -> HybridConfig {
    HybridConfig {
        lr: cfg.lr as f32,
        optimizer: OptimizerConfig {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            lars: (cfg.optimizer == OptimizerKind::Lars).then(|| LarsConfig {
                trust_coefficient: cfg.lars_trust,
                weight_decay: cfg.weight_decay,
                ..LarsConfig::default()
            }),
        },
        logit_scale: cfg.logit_scale,
        micro_batches: cfg.micro_batches,
        accumulation: cfg.accumulation,
        ..HybridConfig::default()
    }
}

/// Trains on `train`, evaluating on `test` after every epoch.
pub fn train(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure!(!train.is_empty(), "training set is empty");
    ensure!(
        train.num_classes == cfg.classes,
        "dataset has {} classes but `classes` is {}",
        train.num_classes,
        cfg.classes
    );
    let sizes = cfg.layer_sizes(train.dim());
    let model = Model::new(&sizes, Activation::Tanh, cfg.classes, cfg.model_seed)?;
    let topology = WorkerTopology::new(cfg.workers, cfg.classes)?;
    let mut state = HybridState::new(&model, topology)?;
    let p = cfg.workers;
    if cfg.sparsity > 0.0 {
        state.enable_sparsification(SparsifyConfig {
            ratio: 0.0,
            momentum: cfg.sparsity_momentum,
        })?;
    }
    let warmup = SparsityWarmup {
        start: cfg.sparsity_warmup_start,
        epochs: cfg.sparsity_warmup_epochs,
    };
    let mut hcfg = hybrid_config(cfg);
    let m_active = ((cfg.active_fraction * cfg.classes as f64).round() as usize).clamp(1, cfg.classes);

    let plan = plan_steps(cfg, train.len())?;
    let mut metrics = RunMetrics::default();
    let mut comm = CommStats::new(p);
    let mut last_schedule = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut graph: Option<KnnGraph> = None;
    let mut cursor = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.shuffle_seed.wrapping_add(epoch as u64)));
        let mut rebuild_ms = 0.0;
        if cfg.mode == SoftmaxMode::Knn && epoch % cfg.rebuild_every == 0 {
            let t0 = Instant::now();
            graph = Some(build_graph(&state.to_model()?, cfg.knn_k, cfg.knn_kprime, &topology)?);
            rebuild_ms = t0.elapsed().as_secs_f64() * 1e3;
        }
        if state.is_sparsified() {
            state.set_sparsity_ratio(warmup.ratio_at(epoch, cfg.sparsity))?;
        }
        let mut offset = 0;
        while cursor < plan.len() && plan[cursor].epoch == epoch {
            let row = plan[cursor];
            let b = worker_batch(row.batch_size, p, train.len());
            if offset + b > order.len() {
                offset = 0;
            }
            let (x, labels) = train.subset(&order[offset..offset + b])?;
            offset += b;
            let active = match &graph {
                Some(g) => {
                    let mut distinct = labels.clone();
                    distinct.sort_unstable();
                    distinct.dedup();
                    let sel = SelectionConfig {
                        m_active: m_active.max(distinct.len()),
                        rng_seed: cfg.selection_seed.wrapping_add(row.step as u64),
                    };
                    Some(select_active_classes(g, &labels, &sel, cfg.classes)?)
                }
                None => None,
            };
            hcfg.lr = row.lr as f32;
            let report = train_step_hybrid(&mut state, &x, &labels, active.as_ref(), &hcfg)
                .with_context(|| format!("step {}", row.step))?;
            ensure!(report.loss.is_finite(), "loss diverged at step {}", row.step);
            comm.merge(&report.stats);
            metrics.steps.push(StepMetrics {
                step: row.step,
                epoch,
                loss: report.loss,
                lr: row.lr,
                batch_size: b,
                achieved_sparsity: report.achieved_sparsity,
                sync_rounds: comm.sync_rounds(),
            });
            last_schedule = Some(report.schedule);
            cursor += 1;
        }
        let (acc, _) = evaluate(&state.to_model()?, test)?;
        metrics.epochs.push(EpochMetrics {
            epoch,
            test_accuracy: acc,
            graph_rebuild_ms: rebuild_ms,
        });
    }
    Ok(TrainOutcome {
        model: state.to_model()?,
        metrics,
        comm,
        last_schedule,
        config_hash: cfg.model_hash(train.dim()),
    })
}

/// Files written by [`write_outputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct OutputFiles {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub epochs: PathBuf,
    pub comm_stats: PathBuf,
    pub events: PathBuf,
    pub config: PathBuf,
}

pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, out: &TrainOutcome) -> Result<OutputFiles> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let files = OutputFiles {
        checkpoint: dir.join("model.ck"),
        metrics: dir.join("metrics.csv"),
        epochs: dir.join("epochs.csv"),
        comm_stats: dir.join("comm_stats.csv"),
        events: dir.join("events.csv"),
        config: dir.join("config.txt"),
    };
    save_checkpoint(
        &files.checkpoint,
        &Checkpoint {
            config_hash: out.config_hash,
            model: out.model.clone(),
        },
    )?;
    fs::write(&files.metrics, out.metrics.steps_csv())?;
    fs::write(&files.epochs, out.metrics.epochs_csv())?;
    fs::write(&files.comm_stats, out.comm.to_csv())?;
    let events = out
        .last_schedule
        .as_ref()
        .map(PipelineSchedule::to_csv)
        .unwrap_or_default();
    fs::write(&files.events, events)?;
    fs::write(&files.config, cfg.to_text())?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worker_batches_are_multiples() {
        assert_eq!(worker_batch(64, 4, 1000), 64);
        assert_eq!(worker_batch(66, 4, 1000), 64);
        assert_eq!(worker_batch(3, 4, 1000), 4);
        assert_eq!(worker_batch(5000, 3, 1000), 999);
    }

    #[test]
    fn piecewise_plan_decays_at_boundaries() {
        let cfg = ExperimentConfig {
            epochs: 4,
            batch: 10,
            lr: 1.0,
            warmup_epochs: 1.0,
            decay_epochs: vec![2, 3],
            decay_factor: 0.5,
            ..ExperimentConfig::default()
        };
        let rows = plan_steps(&cfg, 40).unwrap();
        assert_eq!(rows.len(), 16);
        assert_eq!(rows[0].lr, 0.0);
        assert_eq!(rows[2].lr, 0.5);
        assert_eq!(rows[4].lr, 1.0);
        assert_eq!(rows[8].lr, 0.5);
        assert_eq!(rows[12].lr, 0.25);
        assert!(rows.windows(2).all(|w| w[1].step == w[0].step + 1));
    }
}
