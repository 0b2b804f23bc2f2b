use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::math::{dot, DenseMatrix};

/// Exact k-nearest-neighbor lists over normalized class weights.
///
/// Every class lists itself first, followed by the `k - 1` other classes with
/// the largest inner product, ties going to the lower class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnGraph {
    num_classes: usize,
    k: usize,
    /// `num_classes * k` entries, row `j` holds the neighbors of class `j`.
    neighbors: Vec<u32>,
}

impl KnnGraph {
    pub fn from_lists(lists: Vec<Vec<u32>>) -> Result<Self> {
        let num_classes = lists.len();
        let k = lists.first().map_or(0, Vec::len);
        let mut neighbors = Vec::with_capacity(num_classes * k);
        for (j, list) in lists.into_iter().enumerate() {
            if list.len() != k {
                return Err(Error::Format(format!(
                    "class {j} has {} neighbors, expected {k}",
                    list.len()
                )));
            }
            if let Some(&bad) = list.iter().find(|&&n| n as usize >= num_classes) {
                return Err(Error::Format(format!("class {j} lists unknown neighbor {bad}")));
            }
            neighbors.extend(list);
        }
        Ok(Self {
            num_classes,
            k,
            neighbors,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn neighbors(&self, class: usize) -> &[u32] {
        &self.neighbors[class * self.k..(class + 1) * self.k]
    }

    pub fn lists(&self) -> impl Iterator<Item = &[u32]> {
        (0..self.num_classes).map(move |j| self.neighbors(j))
    }
}

/// A scored neighbor candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Candidate {
    pub score: f32,
    pub index: u32,
}

/// Better candidates sort first: higher score, then lower index.
#[inline]
pub(crate) fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    // +0.0 and -0.0 must compare equal so the index decides
    let sa = if a.score == 0.0 { 0.0 } else { a.score };
    let sb = if b.score == 0.0 { 0.0 } else { b.score };
    sb.total_cmp(&sa).then(a.index.cmp(&b.index))
}

/// Bounded, sorted list of the best candidates seen so far.
#[derive(Debug, Clone)]
pub(crate) struct CandidateList {
    cap: usize,
    items: Vec<Candidate>,
}

impl CandidateList {
    pub fn new(cap: usize) -> Self {
        Self {
            cap,
            items: Vec::with_capacity(cap),
        }
    }

    #[inline]
    pub fn offer(&mut self, c: Candidate) {
        if self.cap == 0 {
            return;
        }
        if self.items.len() == self.cap {
            let worst = self.items[self.cap - 1];
            if rank_order(&c, &worst) != Ordering::Less {
                return;
            }
            self.items.pop();
        }
        let pos = self
            .items
            .partition_point(|x| rank_order(x, &c) == Ordering::Less);
        self.items.insert(pos, c);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn into_vec(self) -> Vec<Candidate> {
        self.items
    }
}

/// Contiguous assignment of classes to shards; block sizes differ by at most one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardLayout {
    num_classes: usize,
    num_shards: usize,
}

impl ShardLayout {
    pub fn new(num_classes: usize, num_shards: usize) -> Result<Self> {
        if num_shards == 0 {
            return Err(Error::InvalidConfig("need at least one shard".into()));
        }
        if num_shards > num_classes {
            return Err(Error::EmptyShard(num_classes));
        }
        Ok(Self {
            num_classes,
            num_shards,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_shards(&self) -> usize {
        self.num_shards
    }

    fn base(&self) -> usize {
        self.num_classes / self.num_shards
    }

    fn extra(&self) -> usize {
        self.num_classes % self.num_shards
    }

    /// Classes owned by `shard` as a half-open range.
    pub fn range(&self, shard: usize) -> std::ops::Range<usize> {
        assert!(shard < self.num_shards, "shard {shard} out of range");
        let (base, extra) = (self.base(), self.extra());
        let start = shard * base + shard.min(extra);
        let len = base + usize::from(shard < extra);
        start..start + len
    }

    pub fn shard_of(&self, class: usize) -> usize {
        assert!(class < self.num_classes, "class {class} out of range");
        let (base, extra) = (self.base(), self.extra());
        let big = extra * (base + 1);
        if class < big {
            class / (base + 1)
        } else {
            extra + (class - big) / base
        }
    }

    /// Splits the rows of `w` into per-shard blocks.
    pub fn split_rows(&self, w: &DenseMatrix) -> Result<Vec<DenseMatrix>> {
        if w.rows() != self.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "{} rows for a layout over {} classes",
                w.rows(),
                self.num_classes
            )));
        }
        Ok((0..self.num_shards)
            .map(|p| {
                let r = self.range(p);
                w.row_block(r.start, r.end)
            })
            .collect())
    }
}

/// Neighbor list of one class from its scored non-self candidates.
pub(crate) fn finish_list(class: usize, mut others: Vec<Candidate>, k: usize) -> Vec<u32> {
    others.sort_by(rank_order);
    let mut list = Vec::with_capacity(k);
    list.push(class as u32);
    list.extend(others.into_iter().take(k.saturating_sub(1)).map(|c| c.index));
    list
}

/// Exact graph by linear search over every pair of classes.
pub fn build_graph_bruteforce(w_norm: &DenseMatrix, k: usize) -> Result<KnnGraph> {
    let n = w_norm.rows();
    if k > n {
        return Err(Error::KTooLarge { k, available: n });
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    let mut neighbors = Vec::with_capacity(n * k);
    for j in 0..n {
        let wj = w_norm.row(j);
        let mut best = CandidateList::new(k - 1);
        for i in (0..n).filter(|&i| i != j) {
            best.offer(Candidate {
                score: dot(wj, w_norm.row(i)),
                index: i as u32,
            });
        }
        neighbors.extend(finish_list(j, best.into_vec(), k));
    }
    Ok(KnnGraph {
        num_classes: n,
        k,
        neighbors,
    })
}
