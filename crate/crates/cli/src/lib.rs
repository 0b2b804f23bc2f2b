//! Dataset generation, experiment configuration, training driver and the
//! retrieval classifier behind the `xclass` binary.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod deploy;
pub mod train;
