//! Ring-distributed exact graph construction.
//!
//! Each shard owns a contiguous block of normalized class weights. Blocks
//! travel once around the ring; on every hop a shard scores the visiting
//! block against its own classes and folds the results into a bounded
//! k'-candidate list per owned class. After the last hop the candidates are
//! re-scored and cut down to the final k.

use std::thread;

use crate::error::{Error, Result};
use crate::knn::graph::{finish_list, Candidate, CandidateList, KnnGraph};
use crate::math::{dot, DenseMatrix};
use crate::sim::channel::{ordered_channel, MessageKind, OrderedReceiver, Payload};

/// Instrumentation collected while building a graph on the ring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingBuildStats {
    /// Blocks received by each shard.
    pub transfers: Vec<usize>,
    /// Largest number of candidate entries plus visiting-block rows a shard
    /// held at once.
    pub peak_entries: Vec<usize>,
}

struct ShardResult {
    lists: Vec<Vec<u32>>,
    transfers: usize,
    peak_entries: usize,
}

pub fn build_graph_ring(w_shards: &[DenseMatrix], k: usize, kprime: usize) -> Result<KnnGraph> {
    build_graph_ring_with_stats(w_shards, k, kprime).map(|(g, _)| g)
}

pub fn build_graph_ring_with_stats(
    w_shards: &[DenseMatrix],
    k: usize,
    kprime: usize,
) -> Result<(KnnGraph, RingBuildStats)> {
    if w_shards.is_empty() {
        return Err(Error::InvalidConfig("no shards given".into()));
    }
    if let Some(p) = w_shards.iter().position(|s| s.rows() == 0) {
        return Err(Error::EmptyShard(p));
    }
    let dim = w_shards[0].cols();
    if w_shards.iter().any(|s| s.cols() != dim) {
        return Err(Error::ShapeMismatch("shards disagree on embedding width".into()));
    }
    let n: usize = w_shards.iter().map(DenseMatrix::rows).sum();
    if k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    if k > n {
        return Err(Error::KTooLarge { k, available: n });
    }
    if kprime < k {
        return Err(Error::KPrimeTooSmall { k, kprime });
    }
    let p = w_shards.len();
    let offsets: Vec<usize> = w_shards
        .iter()
        .scan(0, |acc, s| {
            let start = *acc;
            *acc += s.rows();
            Some(start)
        })
        .collect();

    // channel r carries blocks from shard r to shard (r + 1) % p
    let mut senders = Vec::with_capacity(p);
    let mut receivers: Vec<Option<OrderedReceiver>> = (0..p).map(|_| None).collect();
    for r in 0..p {
        let (tx, rx) = ordered_channel();
        senders.push(tx);
        receivers[(r + 1) % p] = Some(rx);
    }

    let results: Vec<Result<ShardResult>> = thread::scope(|scope| {
        let handles: Vec<_> = senders
            .into_iter()
            .zip(receivers)
            .enumerate()
            .map(|(rank, (mut tx, rx))| {
                let own = &w_shards[rank];
                let offsets = &offsets;
                let mut rx = rx.expect("every shard has an upstream neighbor");
                scope.spawn(move || -> Result<ShardResult> {
                    let own_start = offsets[rank];
                    let mut cands: Vec<CandidateList> =
                        (0..own.rows()).map(|_| CandidateList::new(kprime)).collect();
                    let mut peak = 0usize;
                    let mut held: (usize, DenseMatrix) = (rank, own.clone());
                    let mut transfers = 0;
                    for step in 0..p {
                        if step > 0 {
                            // forward what we scored last, then take the next block
                            tx.send(MessageKind::RingPass, held.0, Payload::Dense(held.1))?;
                            let msg = rx.recv()?;
                            let block = match msg.payload {
                                Payload::Dense(m) => m,
                                _ => return Err(Error::Format("ring carried a non-dense payload".into())),
                            };
                            held = (msg.origin, block);
                            transfers += 1;
                        }
                        let (origin, block) = (&held.0, &held.1);
                        let block_start = offsets[*origin];
                        let visiting_rows = if *origin == rank { 0 } else { block.rows() };
                        for (local, list) in cands.iter_mut().enumerate() {
                            let class = own_start + local;
                            let wc = own.row(local);
                            for b in 0..block.rows() {
                                let other = block_start + b;
                                if other != class {
                                    list.offer(Candidate {
                                        score: dot(wc, block.row(b)),
                                        index: other as u32,
                                    });
                                }
                            }
                        }
                        let held_entries: usize = cands.iter().map(CandidateList::len).sum();
                        peak = peak.max(held_entries + visiting_rows);
                    }
                    drop(tx);
                    // Refinement: keep the best k of the k' survivors. Candidate
                    // scores are already full single precision, so re-ranking the
                    // stored scores is the same as recomputing them.
                    let lists = cands
                        .into_iter()
                        .enumerate()
                        .map(|(local, list)| finish_list(own_start + local, list.into_vec(), k))
                        .collect();
                    Ok(ShardResult {
                        lists,
                        transfers,
                        peak_entries: peak,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ring worker panicked"))
            .collect()
    });

    let mut lists = Vec::with_capacity(n);
    let mut stats = RingBuildStats {
        transfers: Vec::with_capacity(p),
        peak_entries: Vec::with_capacity(p),
    };
    for r in results {
        let r = r?;
        lists.extend(r.lists);
        stats.transfers.push(r.transfers);
        stats.peak_entries.push(r.peak_entries);
    }
    Ok((KnnGraph::from_lists(lists)?, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::graph::{build_graph_bruteforce, ShardLayout};
    use crate::math::{l2_normalize_rows, NORM_EPSILON};

    fn random_unit_rows(n: usize, d: usize, seed: u64) -> DenseMatrix {
        let mut s = seed;
        let data = (0..n * d)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 40) as f32 / (1u64 << 24) as f32 - 0.5
            })
            .collect();
        l2_normalize_rows(&DenseMatrix::from_vec(n, d, data).unwrap(), NORM_EPSILON).unwrap()
    }

    #[test]
    fn single_shard_equals_bruteforce() {
        let w = random_unit_rows(25, 6, 3);
        assert_eq!(
            build_graph_ring(&[w.clone()], 4, 8).unwrap(),
            build_graph_bruteforce(&w, 4).unwrap()
        );
    }

    #[test]
    fn four_shards_equal_bruteforce() {
        let w = random_unit_rows(40, 8, 5);
        let layout = ShardLayout::new(40, 4).unwrap();
        let shards = layout.split_rows(&w).unwrap();
        let (g, stats) = build_graph_ring_with_stats(&shards, 3, 6).unwrap();
        assert_eq!(g, build_graph_bruteforce(&w, 3).unwrap());
        assert_eq!(stats.transfers, vec![3; 4]);
    }

    #[test]
    fn kprime_below_k_is_rejected() {
        let w = random_unit_rows(10, 3, 1);
        assert_eq!(
            build_graph_ring(&[w], 4, 3),
            Err(Error::KPrimeTooSmall { k: 4, kprime: 3 })
        );
    }

    #[test]
    fn empty_shard_is_rejected() {
        let w = random_unit_rows(10, 3, 1);
        assert_eq!(
            build_graph_ring(&[w, DenseMatrix::zeros(0, 3)], 2, 4),
            Err(Error::EmptyShard(1))
        );
    }

    #[test]
    fn peak_memory_is_bounded() {
        let w = random_unit_rows(53, 5, 9);
        let layout = ShardLayout::new(53, 4).unwrap();
        let shards = layout.split_rows(&w).unwrap();
        let kprime = 7;
        let (_, stats) = build_graph_ring_with_stats(&shards, 4, kprime).unwrap();
        let largest = shards.iter().map(DenseMatrix::rows).max().unwrap();
        for (p, peak) in stats.peak_entries.iter().enumerate() {
            assert!(*peak <= shards[p].rows() * kprime + largest);
        }
    }
}
