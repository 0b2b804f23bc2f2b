//! Independent reference implementations used only by tests.
//!
//! Everything here is written from scratch in double precision with the
//! plainest possible loops, so it shares no code with the library under
//! test.

/// Row-major matrix of doubles.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length");
        Self { rows, cols, data }
    }

    pub fn from_f32(rows: usize, cols: usize, data: &[f32]) -> Self {
        Self::new(rows, cols, data.iter().map(|&v| v as f64).collect())
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Triple loop `a · bᵀ` when `transpose_b`, else `a · b`.
pub fn naive_matmul(a: &Mat, b: &Mat, transpose_b: bool) -> Mat {
    let (n, inner) = if transpose_b { (b.rows, b.cols) } else { (b.cols, b.rows) };
    assert_eq!(a.cols, inner, "inner dimensions");
    let mut out = vec![0.0; a.rows * n];
    for i in 0..a.rows {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..inner {
                let bv = if transpose_b { b.at(j, k) } else { b.at(k, j) };
                s += a.at(i, k) * bv;
            }
            out[i * n + j] = s;
        }
    }
    Mat::new(a.rows, n, out)
}

/// Same triple loop in single precision, accumulating left to right.
pub fn naive_matmul_f32(a: &[f32], a_rows: usize, inner: usize, b: &[f32], b_cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; a_rows * b_cols];
    for i in 0..a_rows {
        for j in 0..b_cols {
            let mut s = 0.0f32;
            for k in 0..inner {
                s += a[i * inner + k] * b[k * b_cols + j];
            }
            out[i * b_cols + j] = s;
        }
    }
    out
}

/// Mean cross-entropy of softmax over each row.
pub fn softmax_xent(logits: &Mat, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        total += sum.ln() + max - row[y];
    }
    total / labels.len() as f64
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn normalize_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..m.rows {
        let n = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..m.cols {
            out.data[r * m.cols + c] /= n;
        }
    }
    out
}

/// Forward pass of a tanh (or identity) multi-layer perceptron. Weights are
/// `out x in`; the nonlinearity is skipped after the last layer.
pub fn mlp_forward(weights: &[Mat], biases: &[Vec<f64>], tanh: bool, x: &Mat) -> Mat {
    let mut h = x.clone();
    for (l, (w, b)) in weights.iter().zip(biases).enumerate() {
        let mut z = naive_matmul(&h, w, true);
        for r in 0..z.rows {
            for c in 0..z.cols {
                let v = z.data[r * z.cols + c] + b[c];
                z.data[r * z.cols + c] = if tanh && l + 1 < weights.len() { v.tanh() } else { v };
            }
        }
        h = z;
    }
    h
}

/// Loss of softmax over `scale * cos(x_i, w_j)` restricted to the classes in
/// `active` (labels are global class ids and must be active).
pub fn cosine_softmax_loss(x: &Mat, w: &Mat, labels: &[usize], active: &[usize], scale: f64) -> f64 {
    let xn = normalize_rows(x);
    let wn = normalize_rows(w);
    let mut logits = Vec::with_capacity(x.rows * active.len());
    for i in 0..x.rows {
        for &c in active {
            let d: f64 = xn.row(i).iter().zip(wn.row(c)).map(|(a, b)| a * b).sum();
            logits.push(scale * d);
        }
    }
    let local: Vec<usize> = labels
        .iter()
        .map(|y| active.iter().position(|c| c == y).expect("label must be active"))
        .collect();
    softmax_xent(&Mat::new(x.rows, active.len(), logits), &local)
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)` with Euclidean norms.
pub fn rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "length");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// Top-`k` by absolute value via a full sort; ties go to the lower index.
pub fn topk_full_sort(t: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..t.len()).collect();
    idx.sort_by(|&a, &b| {
        t[b].abs()
            .partial_cmp(&t[a].abs())
            .expect("finite input")
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Neighbor lists from a full score matrix (`scores[i][j]` is the similarity
/// of classes `i` and `j`): self first, then the rest by descending score,
/// ties to the lower index.
pub fn knn_full_sort(scores: &[Vec<f32>], k: usize) -> Vec<Vec<u32>> {
    scores
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut others: Vec<usize> = (0..row.len()).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| {
                row[b]
                    .partial_cmp(&row[a])
                    .expect("finite scores")
                    .then(a.cmp(&b))
            });
            std::iter::once(i)
                .chain(others.into_iter().take(k - 1))
                .map(|j| j as u32)
                .collect()
        })
        .collect()
}

/// Plain single-precision dot product, left to right.
pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_by_hand() {
        let a = Mat::new(1, 2, vec![1.0, 2.0]);
        let b = Mat::new(2, 1, vec![3.0, 4.0]);
        assert_eq!(naive_matmul(&a, &b, false).data, vec![11.0]);
    }

    #[test]
    fn uniform_softmax_loss() {
        let l = Mat::new(1, 2, vec![0.0, 0.0]);
        assert!((softmax_xent(&l, &[0]) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn diff_of_square() {
        let g = central_diff(|p| p[0] * p[0] + 3.0 * p[1], &[2.0, 1.0], 1e-4);
        assert!((g[0] - 4.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn topk_ties_prefer_low_index() {
        assert_eq!(topk_full_sort(&[1.0, -3.0, 3.0, 0.5], 2), vec![1, 2]);
    }

    #[test]
    fn knn_self_first() {
        let s = vec![vec![1.0, 1.0, 0.2], vec![1.0, 1.0, 0.0], vec![0.2, 0.0, 1.0]];
        assert_eq!(knn_full_sort(&s, 2), vec![vec![0, 1], vec![1, 0], vec![2, 0]]);
    }
}
