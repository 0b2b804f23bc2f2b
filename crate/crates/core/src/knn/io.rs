//! Graph cache file.
//!
//! Layout, all little-endian: magic `XKNN`, version `u32`, class count `u64`,
//! then for each class its neighbor count `u32` followed by that many `u32`
//! neighbor indices.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::knn::graph::KnnGraph;

pub const GRAPH_MAGIC: &[u8; 4] = b"XKNN";
pub const GRAPH_VERSION: u32 = 1;

pub fn write_graph<W: Write>(g: &KnnGraph, mut out: W) -> Result<()> {
    out.write_all(GRAPH_MAGIC)?;
    out.write_all(&GRAPH_VERSION.to_le_bytes())?;
    out.write_all(&(g.num_classes() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(4 * (g.k() + 1));
    for list in g.lists() {
        buf.clear();
        buf.extend_from_slice(&(list.len() as u32).to_le_bytes());
        for &n in list {
            buf.extend_from_slice(&n.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated graph file: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_graph<R: Read>(mut input: R) -> Result<KnnGraph> {
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("truncated graph file: {e}")))?;
    if &magic != GRAPH_MAGIC {
        return Err(Error::Format("not a graph file (bad magic)".into()));
    }
    let version = read_u32(&mut input)?;
    if version != GRAPH_VERSION {
        return Err(Error::Format(format!("unsupported graph version {version}")));
    }
    let mut nb = [0u8; 8];
    input
        .read_exact(&mut nb)
        .map_err(|e| Error::Format(format!("truncated graph file: {e}")))?;
    let n = u64::from_le_bytes(nb) as usize;
    let mut lists = Vec::with_capacity(n.min(1 << 24));
    for _ in 0..n {
        let k = read_u32(&mut input)? as usize;
        let list = (0..k).map(|_| read_u32(&mut input)).collect::<Result<Vec<_>>>()?;
        lists.push(list);
    }
    KnnGraph::from_lists(lists)
}
