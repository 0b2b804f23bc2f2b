use std::ops::Range;

use crate::error::Result;
use crate::knn::ShardLayout;

/// Hybrid layout: worker `r` holds extractor replica `r` and classifier
/// shard `r`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerTopology {
    layout: ShardLayout,
}

impl WorkerTopology {
    pub fn new(num_workers: usize, num_classes: usize) -> Result<Self> {
        Ok(Self {
            layout: ShardLayout::new(num_classes, num_workers)?,
        })
    }

    pub fn num_workers(&self) -> usize {
        self.layout.num_shards()
    }

    pub fn num_classes(&self) -> usize {
        self.layout.num_classes()
    }

    pub fn layout(&self) -> &ShardLayout {
        &self.layout
    }

    /// Classes whose classifier rows live on `worker`.
    pub fn owned_classes(&self, worker: usize) -> Range<usize> {
        self.layout.range(worker)
    }
}
