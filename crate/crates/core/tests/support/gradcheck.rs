//! Finite-difference gradient checks shared by the core test suite and the
//! acceptance run. Each function returns the worst relative error over
//! every tensor of one seeded random instance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xclass_core::knn_softmax::{knn_softmax_forward_backward, ActiveSet};
use xclass_core::math::{
    fc_forward_backward, l2_normalize_backward, l2_normalize_rows_with_norms, softmax_xent, Activation,
    DenseMatrix, Mlp, NORM_EPSILON,
};
use xclass_oracles as oracle;
use xclass_oracles::Mat;

const STEP: f64 = 1e-3;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    DenseMatrix::from_vec(rows, cols, data).unwrap()
}

/// Random rows rescaled to norms in [0.5, 1.5].
fn unit_order_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DenseMatrix {
    let mut m = random(rng, rows, cols);
    for r in 0..rows {
        let target = rng.random_range(0.5f32..1.5);
        let norm = m.row(r).iter().map(|v| v * v).sum::<f32>().sqrt();
        for v in m.row_mut(r) {
            *v *= target / norm;
        }
    }
    m
}

fn mat(m: &DenseMatrix) -> Mat {
    Mat::from_f32(m.rows(), m.cols(), m.as_slice())
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// NaN counts as infinitely wrong so `f64::max` cannot drop it.
fn err(analytic: &[f32], numeric: &[f64]) -> f64 {
    let e = oracle::rel_error(&widen(analytic), numeric, 1e-6);
    if e.is_nan() {
        f64::INFINITY
    } else {
        e
    }
}

/// Worst relative error of softmax logit gradients on one random instance.
pub fn softmax_instance(seed: u64) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, c) = (rng.random_range(1..6), rng.random_range(2..9));
    let mut logits = random(&mut rng, m, c);
    logits.scale_in_place(3.0);
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
    let out = softmax_xent(&logits, &labels).unwrap();
    let numeric = oracle::central_diff(
        |p| oracle::softmax_xent(&Mat::new(m, c, p.to_vec()), &labels),
        &widen(logits.as_slice()),
        STEP,
    );
    worst = worst.max(err(out.grad_logits.as_slice(), &numeric));
    worst
}

/// Same for the input and weight gradients of a linear layer.
pub fn fc_instance(seed: u64) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let (m, d, c) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(1..7));
    let (x, w, up) = (random(&mut rng, m, d), random(&mut rng, c, d), random(&mut rng, m, c));
    let pass = fc_forward_backward(&x, &w, &up).unwrap();
    // loss = sum(upstream ⊙ x wᵀ) has exactly these gradients
    let up64 = mat(&up);
    let loss = |x: &Mat, w: &Mat| -> f64 {
        let l = oracle::naive_matmul(x, w, true);
        l.data.iter().zip(&up64.data).map(|(a, b)| a * b).sum()
    };
    let w64 = mat(&w);
    let gx = oracle::central_diff(|p| loss(&Mat::new(m, d, p.to_vec()), &w64), &widen(x.as_slice()), STEP);
    worst = worst.max(err(pass.grad_x.as_slice(), &gx));
    let x64 = mat(&x);
    let gw = oracle::central_diff(|p| loss(&x64, &Mat::new(c, d, p.to_vec())), &widen(w.as_slice()), STEP);
    worst = worst.max(err(pass.grad_w.as_slice(), &gw));
    worst
}

/// Same for every parameter and the input of a tanh MLP.
pub fn mlp_instance(seed: u64) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
    let sizes = [rng.random_range(1..5), rng.random_range(1..7), rng.random_range(1..5)];
    let net = Mlp::new(&sizes, Activation::Tanh, seed).unwrap();
    let m = rng.random_range(1..5);
    let x = random(&mut rng, m, sizes[0]);
    let g_out = random(&mut rng, m, sizes[2]);
    let (_, cache) = net.forward(&x).unwrap();
    let (grads, grad_in) = net.backward(&cache, &g_out).unwrap();

    let g64 = mat(&g_out);
    let objective = |ws: &[Mat], bs: &[Vec<f64>], x: &Mat| -> f64 {
        let f = oracle::mlp_forward(ws, bs, true, x);
        f.data.iter().zip(&g64.data).map(|(a, b)| a * b).sum()
    };
    let ws: Vec<Mat> = net.weights().iter().map(mat).collect();
    let bs: Vec<Vec<f64>> = net.biases().iter().map(|b| widen(b)).collect();

    let gin = oracle::central_diff(|p| objective(&ws, &bs, &Mat::new(m, sizes[0], p.to_vec())), &widen(x.as_slice()), STEP);
    worst = worst.max(err(grad_in.as_slice(), &gin));
    let x64 = mat(&x);
    for l in 0..ws.len() {
        let gw = oracle::central_diff(
            |p| {
                let mut w2 = ws.clone();
                w2[l].data = p.to_vec();
                objective(&w2, &bs, &x64)
            },
            &ws[l].data,
            STEP,
        );
        worst = worst.max(err(grads.weights[l].as_slice(), &gw));
        let gb = oracle::central_diff(
            |p| {
                let mut b2 = bs.clone();
                b2[l] = p.to_vec();
                objective(&ws, &b2, &x64)
            },
            &bs[l],
            STEP,
        );
        worst = worst.max(err(&grads.biases[l], &gb));
    }
    worst
}

/// Same for cosine softmax over an active class subset, through the row
/// normalization. Inactive classifier rows must get exactly zero.
pub fn knn_instance(seed: u64) -> f64 {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
    let (m, d, n) = (rng.random_range(1..5), rng.random_range(2..6), rng.random_range(2..10));
    let x = unit_order_rows(&mut rng, m, d);
    let w = unit_order_rows(&mut rng, n, d);
    let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
    let mut classes = labels.clone();
    classes.extend((0..rng.random_range(0..n)).map(|_| rng.random_range(0..n)));
    let active = ActiveSet::from_classes(classes, &labels);
    // a moderate scale keeps the softmax away from saturation, where
    // single-precision p - 1 loses most of its digits
    let scale = 4.0;

    let (xn, xnorms) = l2_normalize_rows_with_norms(&x, NORM_EPSILON).unwrap();
    let (wn, wnorms) = l2_normalize_rows_with_norms(&w, NORM_EPSILON).unwrap();
    let out = knn_softmax_forward_backward(&xn, &wn, &labels, &active, scale).unwrap();
    let gx = l2_normalize_backward(&xn, &xnorms, &out.grad_features).unwrap();
    let gw = l2_normalize_backward(&wn, &wnorms, &out.grad_weights).unwrap();

    let idx = active.class_indices().to_vec();
    let w64 = mat(&w);
    let numeric_x = oracle::central_diff(
        |p| oracle::cosine_softmax_loss(&Mat::new(m, d, p.to_vec()), &w64, &labels, &idx, scale as f64),
        &widen(x.as_slice()),
        STEP,
    );
    worst = worst.max(err(gx.as_slice(), &numeric_x));
    let x64 = mat(&x);
    let numeric_w = oracle::central_diff(
        |p| oracle::cosine_softmax_loss(&x64, &Mat::new(n, d, p.to_vec()), &labels, &idx, scale as f64),
        &widen(w.as_slice()),
        STEP,
    );
    worst = worst.max(err(gw.as_slice(), &numeric_w));
    for r in (0..n).filter(|r| !active.contains(*r)) {
        if gw.row(r).iter().any(|&v| v != 0.0) {
            worst = f64::INFINITY;
        }
    }
    worst
}
