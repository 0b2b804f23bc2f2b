use crate::error::{shape_err, Result};
use crate::math::matrix::{matmul, matmul_tn, DenseMatrix};

/// Output of a fully connected layer pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FcPass {
    pub logits: DenseMatrix,
    pub grad_x: DenseMatrix,
    pub grad_w: DenseMatrix,
}

/// Forward and backward of a bias-free fully connected layer.
///
/// `x` is `m x D`, `w` is `C x D` (one row per output unit) and `upstream`
/// is the `m x C` gradient arriving at the logits.
pub fn fc_forward_backward(
    x: &DenseMatrix,
    w: &DenseMatrix,
    upstream: &DenseMatrix,
) -> Result<FcPass> {
    let logits = matmul(x, w, true)?;
    if upstream.shape() != logits.shape() {
        return Err(shape_err(format!(
            "upstream {:?} does not match logits {:?}",
            upstream.shape(),
            logits.shape()
        )));
    }
    let grad_x = matmul(upstream, w, false)?;
    let grad_w = matmul_tn(upstream, x)?;
    Ok(FcPass {
        logits,
        grad_x,
        grad_w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn identity_weights_pass_features_through() {
        let x = DenseMatrix::from_rows(&[[1.0f32, -2.0, 3.0], [0.5, 0.0, 4.0]]).unwrap();
        let pass = fc_forward_backward(&x, &DenseMatrix::identity(3), &DenseMatrix::zeros(2, 3))
            .unwrap();
        assert_eq!(pass.logits, x);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let x = DenseMatrix::from_rows(&[[1.0f32, 2.0]]).unwrap();
        let w = DenseMatrix::from_rows(&[[3.0f32, 4.0], [5.0, 6.0], [7.0, 8.0]]).unwrap();
        let pass = fc_forward_backward(&x, &w, &DenseMatrix::zeros(1, 3)).unwrap();
        assert!(pass.grad_x.as_slice().iter().all(|&v| v == 0.0));
        assert!(pass.grad_w.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(pass.grad_w.shape(), w.shape());
        assert_eq!(pass.logits.as_slice(), &[11.0, 17.0, 23.0]);
    }

    #[test]
    fn mismatched_shapes_fail() {
        let x = DenseMatrix::zeros(2, 3);
        assert!(matches!(
            fc_forward_backward(&x, &DenseMatrix::zeros(4, 2), &DenseMatrix::zeros(2, 4)),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(matches!(
            fc_forward_backward(&x, &DenseMatrix::zeros(4, 3), &DenseMatrix::zeros(2, 5)),
            Err(Error::ShapeMismatch(_))
        ));
    }
}
