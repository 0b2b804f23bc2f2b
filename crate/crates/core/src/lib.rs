//! Building blocks for training classifiers with very large label spaces:
//! KNN softmax over an exact class graph, layer-wise top-k gradient
//! sparsification, the fast continuous convergence schedule and a
//! deterministic simulator of hybrid data/model parallel training.

pub mod error;
pub mod fccs;
pub mod knn;
pub mod knn_softmax;
pub mod math;
pub mod sim;
pub mod sparsify;

pub use error::{Error, Result};
