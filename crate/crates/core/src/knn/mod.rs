//! Exact class-similarity graph: brute-force and ring builds, per-shard
//! compressed storage and the on-disk cache format.

mod compressed;
mod graph;
mod io;
mod ring;

pub use compressed::{compress_graph, exclusive_prefix_sum, quick_access, CompressedKnnGraph};
pub use graph::{build_graph_bruteforce, KnnGraph, ShardLayout};
pub use io::{read_graph, write_graph, GRAPH_MAGIC, GRAPH_VERSION};
pub use ring::{build_graph_ring, build_graph_ring_with_stats, RingBuildStats};
