//! Deterministic simulator of hybrid data/model parallel training.

pub mod channel;
pub mod collectives;
pub mod hybrid;
pub mod model;
pub mod pipeline;
pub mod topology;

pub use collectives::{
    all_gather, all_reduce_sum, all_reduce_vec, distributed_softmax_xent,
    distributed_softmax_xent_scaled, sparse_all_reduce, CommStats, WorkerCounters,
};
pub use hybrid::{train_step_hybrid, ExecMode, HybridConfig, HybridState, SparsifyConfig, StepReport};
pub use model::{reference_step, Model, OptimizerConfig, OptimizerState};
pub use pipeline::{pipeline_schedule, PipelineEvent, PipelineMode, PipelineSchedule, Stage, TickCosts};
pub use topology::WorkerTopology;
