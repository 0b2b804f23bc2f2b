//! Layer-wise top-k gradient sparsification.
//!
//! Selection is exact: a tensor is cut into chunks, each chunk contributes
//! its own top-k (capped at the chunk length), and a second top-k over those
//! candidates yields the final answer. Every element of the true top-k is in
//! the top-k of its own chunk, so nothing is lost.
//!
//! [`CompressionState`] adds momentum correction, momentum factor masking and
//! residual accumulation on top of the selection.

use std::cmp::Ordering;
use std::io::{Read, Write};

use crate::error::{shape_err, Error, Result};

/// Selected gradient entries of one layer, indices strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGradient {
    pub layer_id: u32,
    pub indices: Vec<u64>,
    pub values: Vec<f32>,
    pub dense_len: u64,
}

/// Larger magnitude first, then lower index.
#[inline]
fn magnitude_order(t: &[f32], a: usize, b: usize) -> Ordering {
    t[b].abs().total_cmp(&t[a].abs()).then(a.cmp(&b))
}

/// Indices of the `k` best entries among `candidates`, best first.
fn select_best(t: &[f32], mut candidates: Vec<usize>, k: usize) -> Vec<usize> {
    let k = k.min(candidates.len());
    if k == 0 {
        return Vec::new();
    }
    if k < candidates.len() {
        candidates.select_nth_unstable_by(k - 1, |&a, &b| magnitude_order(t, a, b));
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(|&a, &b| magnitude_order(t, a, b));
    candidates
}

/// Default chunk count: one chunk per 4096 elements.
pub fn default_chunks(len: usize) -> usize {
    len.div_ceil(4096).max(1)
}

/// Exact top-`k` of `t` by absolute value (ties to the lower index), returned
/// best first.
pub fn topk_divide_conquer(t: &[f32], k: usize, m_chunks: usize) -> Result<(Vec<usize>, Vec<f32>)> {
    if k > t.len() {
        return Err(Error::KTooLarge {
            k,
            available: t.len(),
        });
    }
    let chunks = m_chunks.clamp(1, t.len().max(1));
    let chunk_len = t.len().div_ceil(chunks).max(1);
    let mut pool = Vec::with_capacity(k.saturating_mul(chunks).min(t.len()));
    let mut start = 0;
    while start < t.len() {
        let end = (start + chunk_len).min(t.len());
        pool.extend(select_best(t, (start..end).collect(), k));
        start = end;
    }
    let idx = select_best(t, pool, k);
    let vals = idx.iter().map(|&i| t[i]).collect();
    Ok((idx, vals))
}

/// Partitions layers into groups whose lengths lie within `ratio` of the
/// group's smallest member. Returns layer ids, each group in ascending
/// length order.
pub fn group_tensors(layers: &[(u32, usize)], ratio: f64) -> Vec<Vec<u32>> {
    let mut sorted = layers.to_vec();
    sorted.sort_by_key(|&(id, len)| (len, id));
    let mut groups: Vec<Vec<u32>> = Vec::new();
    let mut group_min = 0usize;
    for (id, len) in sorted {
        match groups.last_mut() {
            Some(g) if (len as f64) <= ratio * group_min as f64 => g.push(id),
            _ => {
                groups.push(vec![id]);
                group_min = len;
            }
        }
    }
    groups
}

/// Selection over a group of tensors in one pass over their concatenation.
/// `ks[i]` is the budget of tensor `i`; results are per tensor, best first,
/// with indices local to that tensor.
pub fn topk_grouped(
    tensors: &[&[f32]],
    ks: &[usize],
    m_chunks: usize,
) -> Result<Vec<(Vec<usize>, Vec<f32>)>> {
    if tensors.len() != ks.len() {
        return Err(shape_err("one k per grouped tensor required"));
    }
    let flat: Vec<f32> = tensors.iter().flat_map(|t| t.iter().copied()).collect();
    let mut out = Vec::with_capacity(tensors.len());
    let mut base = 0;
    for (t, &k) in tensors.iter().zip(ks) {
        let seg = &flat[base..base + t.len()];
        out.push(topk_divide_conquer(seg, k, m_chunks)?);
        base += t.len();
    }
    Ok(out)
}

/// Number of entries kept for a layer of `len` elements.
pub fn keep_count(len: usize, sparsity_ratio: f64) -> usize {
    // the epsilon keeps (1 - 0.9) * 100 from rounding up to 11
    let k = ((1.0 - sparsity_ratio) * len as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(len)
}

/// Ramps the sparsity ratio from `start` to the target over `epochs` epochs,
/// shrinking the kept fraction geometrically. Disabled by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityWarmup {
    pub start: f64,
    pub epochs: usize,
}

impl SparsityWarmup {
    pub fn ratio_at(&self, epoch: usize, target: f64) -> f64 {
        if self.epochs == 0 || epoch >= self.epochs {
            return target;
        }
        let keep_start = 1.0 - self.start;
        let keep_target = 1.0 - target;
        let frac = epoch as f64 / self.epochs as f64;
        1.0 - keep_start * (keep_target / keep_start).powf(frac)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerBuffers {
    velocity: Vec<f32>,
    residual: Vec<f32>,
}

/// Per-layer momentum and residual buffers of one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionState {
    layers: Vec<LayerBuffers>,
    sparsity_ratio: f64,
    momentum: f32,
}

impl CompressionState {
    pub fn new(layer_lens: &[usize], sparsity_ratio: f64, momentum: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&sparsity_ratio) {
            return Err(Error::InvalidConfig(format!(
                "sparsity ratio {sparsity_ratio} outside [0, 1)"
            )));
        }
        Ok(Self {
            layers: layer_lens
                .iter()
                .map(|&n| LayerBuffers {
                    velocity: vec![0.0; n],
                    residual: vec![0.0; n],
                })
                .collect(),
            sparsity_ratio,
            momentum,
        })
    }

    pub fn sparsity_ratio(&self) -> f64 {
        self.sparsity_ratio
    }

    pub fn set_sparsity_ratio(&mut self, ratio: f64) -> Result<()> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::InvalidConfig(format!("sparsity ratio {ratio} outside [0, 1)")));
        }
        self.sparsity_ratio = ratio;
        Ok(())
    }

    pub fn momentum(&self) -> f32 {
        self.momentum
    }

    pub fn residual(&self, layer: usize) -> &[f32] {
        &self.layers[layer].residual
    }

    pub fn velocity(&self, layer: usize) -> &[f32] {
        &self.layers[layer].velocity
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Folds `grad` into the layer's buffers and emits the top entries of the
    /// accumulated residual.
    pub fn compress_step(&mut self, layer_id: u32, grad: &[f32]) -> Result<SparseGradient> {
        let momentum = self.momentum;
        let ratio = self.sparsity_ratio;
        let buf = self
            .layers
            .get_mut(layer_id as usize)
            .ok_or_else(|| shape_err(format!("unknown layer {layer_id}")))?;
        if grad.len() != buf.velocity.len() {
            return Err(shape_err(format!(
                "layer {layer_id}: gradient of {} for {} parameters",
                grad.len(),
                buf.velocity.len()
            )));
        }
        for ((v, r), g) in buf.velocity.iter_mut().zip(buf.residual.iter_mut()).zip(grad) {
            *v = momentum * *v + g;
            *r += *v;
        }
        let k = keep_count(grad.len(), ratio);
        let (mut idx, _) = topk_divide_conquer(&buf.residual, k, default_chunks(grad.len()))?;
        idx.sort_unstable();
        let values = idx.iter().map(|&i| buf.residual[i]).collect();
        for &i in &idx {
            buf.residual[i] = 0.0;
            buf.velocity[i] = 0.0;
        }
        Ok(SparseGradient {
            layer_id,
            indices: idx.into_iter().map(|i| i as u64).collect(),
            values,
            dense_len: grad.len() as u64,
        })
    }
}

/// Free-function form of [`CompressionState::compress_step`].
pub fn compress_step(state: &mut CompressionState, layer_id: u32, grad: &[f32]) -> Result<SparseGradient> {
    state.compress_step(layer_id, grad)
}

pub fn densify(s: &SparseGradient) -> Vec<f32> {
    let mut out = vec![0.0; s.dense_len as usize];
    for (&i, &v) in s.indices.iter().zip(&s.values) {
        out[i as usize] = v;
    }
    out
}

impl SparseGradient {
    pub fn validate(&self) -> Result<()> {
        if self.indices.len() != self.values.len() {
            return Err(Error::Format("index and value counts differ".into()));
        }
        if self.indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("indices not strictly increasing".into()));
        }
        if self.indices.last().is_some_and(|&i| i >= self.dense_len) {
            return Err(Error::Format("index beyond dense length".into()));
        }
        Ok(())
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// Encoded size in bytes.
    pub fn wire_len(&self) -> usize {
        4 + 8 + 8 + 12 * self.indices.len()
    }

    /// Wire form: `layer_id u32, dense_len u64, count u64`, then
    /// `count x (index u64, value f32)`, little-endian.
    pub fn encode<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = Vec::with_capacity(self.wire_len());
        buf.extend_from_slice(&self.layer_id.to_le_bytes());
        buf.extend_from_slice(&self.dense_len.to_le_bytes());
        buf.extend_from_slice(&(self.indices.len() as u64).to_le_bytes());
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            buf.extend_from_slice(&i.to_le_bytes());
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn decode<R: Read>(mut input: R) -> Result<Self> {
        fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
            let mut b = [0u8; N];
            r.read_exact(&mut b)
                .map_err(|e| Error::Format(format!("truncated sparse gradient: {e}")))?;
            Ok(b)
        }
        let layer_id = u32::from_le_bytes(take(&mut input)?);
        let dense_len = u64::from_le_bytes(take(&mut input)?);
        let count = u64::from_le_bytes(take(&mut input)?);
        if count > dense_len {
            return Err(Error::Format(format!("{count} entries for length {dense_len}")));
        }
        let mut indices = Vec::with_capacity(count as usize);
        let mut values = Vec::with_capacity(count as usize);
        for _ in 0..count {
            indices.push(u64::from_le_bytes(take(&mut input)?));
            values.push(f32::from_le_bytes(take(&mut input)?));
        }
        let s = Self {
            layer_id,
            indices,
            values,
            dense_len,
        };
        s.validate()?;
        Ok(s)
    }
}
