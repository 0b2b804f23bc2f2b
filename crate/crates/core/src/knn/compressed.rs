use crate::error::{Error, Result};
use crate::knn::graph::{KnnGraph, ShardLayout};

/// One shard's view of the class graph.
///
/// Only neighbors owned by the shard are kept, since no other class can be
/// activated there. Lists are stored back to back in `flat_neighbors`; class
/// `y` occupies `offsets[y] .. offsets[y] + k_per_class[y]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedKnnGraph {
    shard: usize,
    shard_classes: Vec<u32>,
    flat_neighbors: Vec<u32>,
    k_per_class: Vec<u32>,
    offsets: Vec<u64>,
}

/// Exclusive prefix sums: `out[0] = 0`, `out[i + 1] = out[i] + counts[i]`.
pub fn exclusive_prefix_sum(counts: &[u32]) -> Vec<u64> {
    let mut acc = 0u64;
    counts
        .iter()
        .map(|&c| {
            let start = acc;
            acc += u64::from(c);
            start
        })
        .collect()
}

pub fn compress_graph(g: &KnnGraph, layout: &ShardLayout, shard: usize) -> Result<CompressedKnnGraph> {
    if shard >= layout.num_shards() {
        return Err(Error::InvalidConfig(format!(
            "shard {shard} out of range for {} shards",
            layout.num_shards()
        )));
    }
    if layout.num_classes() != g.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "layout covers {} classes, graph has {}",
            layout.num_classes(),
            g.num_classes()
        )));
    }
    let owned = layout.range(shard);
    let mut flat_neighbors = Vec::new();
    let mut k_per_class = Vec::with_capacity(g.num_classes());
    for list in g.lists() {
        let before = flat_neighbors.len();
        flat_neighbors.extend(list.iter().filter(|&&n| owned.contains(&(n as usize))));
        k_per_class.push((flat_neighbors.len() - before) as u32);
    }
    let offsets = exclusive_prefix_sum(&k_per_class);
    Ok(CompressedKnnGraph {
        shard,
        shard_classes: owned.map(|c| c as u32).collect(),
        flat_neighbors,
        k_per_class,
        offsets,
    })
}

impl CompressedKnnGraph {
    pub fn shard(&self) -> usize {
        self.shard
    }

    pub fn num_classes(&self) -> usize {
        self.k_per_class.len()
    }

    pub fn shard_classes(&self) -> &[u32] {
        &self.shard_classes
    }

    pub fn flat_neighbors(&self) -> &[u32] {
        &self.flat_neighbors
    }

    pub fn k_per_class(&self) -> &[u32] {
        &self.k_per_class
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets
    }

    /// Retained neighbors of one class.
    #[inline]
    pub fn neighbors(&self, class: usize) -> Result<&[u32]> {
        if class >= self.k_per_class.len() {
            return Err(Error::LabelOutOfRange {
                label: class,
                num_classes: self.k_per_class.len(),
            });
        }
        let start = self.offsets[class] as usize;
        Ok(&self.flat_neighbors[start..start + self.k_per_class[class] as usize])
    }
}

/// Per-label neighbor slices of a compressed graph, each found in O(1).
pub fn quick_access<'a>(cg: &'a CompressedKnnGraph, labels: &[usize]) -> Result<Vec<&'a [u32]>> {
    labels.iter().map(|&y| cg.neighbors(y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph() -> KnnGraph {
        KnnGraph::from_lists(vec![
            vec![0, 3, 1],
            vec![1, 0, 2],
            vec![2, 1, 3],
            vec![3, 2, 0],
        ])
        .unwrap()
    }

    #[test]
    fn prefix_sum_definition() {
        assert_eq!(exclusive_prefix_sum(&[2, 3, 1]), vec![0, 2, 5]);
        assert!(exclusive_prefix_sum(&[]).is_empty());
    }

    #[test]
    fn single_shard_keeps_everything() {
        let g = graph();
        let cg = compress_graph(&g, &ShardLayout::new(4, 1).unwrap(), 0).unwrap();
        assert!(cg.k_per_class().iter().all(|&k| k == 3));
        assert_eq!(cg.flat_neighbors().len(), 12);
        for y in 0..4 {
            assert_eq!(quick_access(&cg, &[y]).unwrap()[0], g.neighbors(y));
        }
    }

    #[test]
    fn two_shards_prune_foreign_neighbors() {
        let g = graph();
        let layout = ShardLayout::new(4, 2).unwrap();
        let lo = compress_graph(&g, &layout, 0).unwrap();
        let hi = compress_graph(&g, &layout, 1).unwrap();
        assert_eq!(lo.shard_classes(), &[0, 1]);
        assert_eq!(lo.k_per_class(), &[2, 2, 1, 1]);
        assert_eq!(lo.offsets(), &[0, 2, 4, 5]);
        assert_eq!(lo.neighbors(0).unwrap(), &[0, 1]);
        assert_eq!(hi.neighbors(0).unwrap(), &[3]);
        assert_eq!(hi.neighbors(3).unwrap(), &[3, 2]);
    }

    #[test]
    fn empty_slice_for_class_without_local_neighbors() {
        let g = KnnGraph::from_lists(vec![vec![0, 1], vec![1, 0], vec![2, 3], vec![3, 2]]).unwrap();
        let cg = compress_graph(&g, &ShardLayout::new(4, 2).unwrap(), 0).unwrap();
        assert_eq!(cg.k_per_class()[2], 0);
        assert!(quick_access(&cg, &[2]).unwrap()[0].is_empty());
    }

    #[test]
    fn bad_label_and_shard() {
        let g = graph();
        let layout = ShardLayout::new(4, 2).unwrap();
        let cg = compress_graph(&g, &layout, 0).unwrap();
        assert_eq!(
            quick_access(&cg, &[1, 4]),
            Err(Error::LabelOutOfRange {
                label: 4,
                num_classes: 4
            })
        );
        assert!(compress_graph(&g, &layout, 2).is_err());
    }
}
