//! Small multi-layer perceptron used as the feature extractor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::math::matrix::{matmul, matmul_tn, DenseMatrix};

/// Nonlinearity applied after every layer except the last.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: f32) -> f32 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Identity => v,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f32) -> f32 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    activation: Activation,
    /// One `out x in` matrix per layer.
    weights: Vec<DenseMatrix>,
    biases: Vec<Vec<f32>>,
}

/// Gradients laid out exactly like the parameters of an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<Vec<f32>>,
}

/// Activations saved by the forward pass for use in backward.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<DenseMatrix>,
}

impl Mlp {
    /// Randomly initialized network with layer widths `sizes`
    /// (`sizes[0]` is the input width, the last entry the feature width).
    pub fn new(sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidConfig(format!("bad layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            // Glorot uniform
            let a = (6.0 / (fan_in + fan_out) as f32).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
            weights.push(DenseMatrix::from_vec(fan_out, fan_in, data)?);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            activation,
            weights,
            biases,
        })
    }

    pub fn from_parts(
        weights: Vec<DenseMatrix>,
        biases: Vec<Vec<f32>>,
        activation: Activation,
    ) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(shape_err("need one bias vector per weight matrix"));
        }
        for (i, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.rows() != b.len() {
                return Err(shape_err(format!("layer {i}: bias length {} vs {} units", b.len(), w.rows())));
            }
            if i > 0 && weights[i - 1].rows() != w.cols() {
                return Err(shape_err(format!("layer {i} expects {} inputs", w.cols())));
            }
        }
        Ok(Self {
            activation,
            weights,
            biases,
        })
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map_or(0, |w| w.rows())
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.weights.iter().map(|w| w.rows()));
        s
    }

    pub fn weights(&self) -> &[DenseMatrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f32>] {
        &self.biases
    }

    /// Parameter tensors in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_mut_slice());
            out.push(b.as_mut_slice());
        }
        out
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<(DenseMatrix, MlpCache)> {
        if x.cols() != self.input_dim() {
            return Err(shape_err(format!(
                "input has {} columns, network expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = matmul(&h, w, true)?;
            for r in 0..z.rows() {
                for (v, bias) in z.row_mut(r).iter_mut().zip(b) {
                    *v += bias;
                }
            }
            if i != last {
                for v in z.as_mut_slice() {
                    *v = self.activation.apply(*v);
                }
            }
            inputs.push(std::mem::replace(&mut h, z));
        }
        Ok((h, MlpCache { inputs }))
    }

    /// Features only, without keeping activations around.
    pub fn features(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.forward(x).map(|(f, _)| f)
    }

    /// Parameter gradients for `grad_features`, plus the gradient with respect
    /// to the network input.
    pub fn backward(
        &self,
        cache: &MlpCache,
        grad_features: &DenseMatrix,
    ) -> Result<(MlpGrads, DenseMatrix)> {
        let batch = cache.inputs[0].rows();
        if grad_features.shape() != (batch, self.output_dim()) {
            return Err(shape_err(format!(
                "feature gradient {:?} does not match output {:?}",
                grad_features.shape(),
                (batch, self.output_dim())
            )));
        }
        let n = self.weights.len();
        let mut gw = vec![DenseMatrix::zeros(0, 0); n];
        let mut gb = vec![Vec::new(); n];
        let mut g = grad_features.clone();
        for i in (0..n).rev() {
            let input = &cache.inputs[i];
            gw[i] = matmul_tn(&g, input)?;
            let mut bias_grad = vec![0.0f32; g.cols()];
            for r in 0..g.rows() {
                for (acc, v) in bias_grad.iter_mut().zip(g.row(r)) {
                    *acc += v;
                }
            }
            gb[i] = bias_grad;
            let mut g_in = matmul(&g, &self.weights[i], false)?;
            if i > 0 {
                // `input` is the activation output of layer i - 1
                for (gv, y) in g_in.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    *gv *= self.activation.derivative_from_output(*y);
                }
            }
            g = g_in;
        }
        Ok((MlpGrads { weights: gw, biases: gb }, g))
    }
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net
                .weights
                .iter()
                .map(|w| DenseMatrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&[f32]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice());
            out.push(b.as_slice());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f32]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_mut_slice());
            out.push(b.as_mut_slice());
        }
        out
    }

    pub fn add_assign(&mut self, other: &MlpGrads) -> Result<()> {
        if self.weights.len() != other.weights.len() {
            return Err(shape_err("gradient sets have different layer counts"));
        }
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            if a.len() != b.len() {
                return Err(shape_err("gradient tensors differ in length"));
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::fc::fc_forward_backward;

    #[test]
    fn zero_network_gives_zero_or_bias_features() {
        let sizes = [3, 5, 2];
        let weights = vec![DenseMatrix::zeros(5, 3), DenseMatrix::zeros(2, 5)];
        let net = Mlp::from_parts(weights.clone(), vec![vec![0.0; 5], vec![0.0; 2]], Activation::Tanh)
            .unwrap();
        assert_eq!(net.sizes(), sizes);
        let x = DenseMatrix::from_rows(&[[1.0f32, 2.0, 3.0], [-1.0, 0.5, 0.0]]).unwrap();
        assert!(net.features(&x).unwrap().as_slice().iter().all(|&v| v == 0.0));

        let biased =
            Mlp::from_parts(weights, vec![vec![0.3; 5], vec![0.7, -0.2]], Activation::Tanh).unwrap();
        let f = biased.features(&x).unwrap();
        for r in 0..2 {
            assert_eq!(f.row(r), &[0.7, -0.2]);
        }
    }

    #[test]
    fn single_linear_layer_matches_fc() {
        let w = DenseMatrix::from_rows(&[[0.1f32, -0.4, 0.2], [0.3, 0.3, -0.9]]).unwrap();
        let net = Mlp::from_parts(vec![w.clone()], vec![vec![0.0; 2]], Activation::Tanh).unwrap();
        let x = DenseMatrix::from_rows(&[[1.0f32, 2.0, 3.0], [-1.0, 0.5, 0.0]]).unwrap();
        let up = DenseMatrix::from_rows(&[[0.5f32, -1.0], [2.0, 0.25]]).unwrap();
        let (feat, cache) = net.forward(&x).unwrap();
        let (grads, gx) = net.backward(&cache, &up).unwrap();
        let fc = fc_forward_backward(&x, &w, &up).unwrap();
        assert_eq!(feat, fc.logits);
        assert_eq!(grads.weights[0], fc.grad_w);
        assert_eq!(gx, fc.grad_x);
    }

    #[test]
    fn forward_is_deterministic() {
        let a = Mlp::new(&[4, 8, 3], Activation::Tanh, 11).unwrap();
        let b = Mlp::new(&[4, 8, 3], Activation::Tanh, 11).unwrap();
        assert_eq!(a, b);
        let x = DenseMatrix::from_rows(&[[0.1f32, 0.2, 0.3, 0.4]]).unwrap();
        assert_eq!(a.features(&x).unwrap(), b.features(&x).unwrap());
    }

    #[test]
    fn bad_shapes_fail() {
        let net = Mlp::new(&[4, 8, 3], Activation::Tanh, 1).unwrap();
        assert!(matches!(net.forward(&DenseMatrix::zeros(2, 5)), Err(Error::ShapeMismatch(_))));
        let (_, cache) = net.forward(&DenseMatrix::zeros(2, 4)).unwrap();
        assert!(matches!(
            net.backward(&cache, &DenseMatrix::zeros(2, 4)),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(Mlp::new(&[4], Activation::Tanh, 1).is_err());
        assert!(Mlp::from_parts(
            vec![DenseMatrix::zeros(3, 2), DenseMatrix::zeros(2, 4)],
            vec![vec![0.0; 3], vec![0.0; 2]],
            Activation::Tanh
        )
        .is_err());
    }
}
