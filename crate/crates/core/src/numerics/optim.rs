use super::matrix::{DenseMatrix, Scalar};
use crate::error::{Error, Result};

/// Adam moments and hyperparameters for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub first_moment: Vec<DenseMatrix<T>>,
    pub second_moment: Vec<DenseMatrix<T>>,
    pub step: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    /// Denominator guard, unrelated to the sink threshold.
    pub eps: T,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[&DenseMatrix<T>], lr: T) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| DenseMatrix::zeros(p.rows(), p.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            first_moment: zeros(),
            second_moment: zeros(),
            step: 0,
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut DenseMatrix<T>],
    grads: &[&DenseMatrix<T>],
    state: &mut OptimizerState<T>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.first_moment[i].shape() {
            return Err(Error::Shape(format!(
                "tensor {i}: parameter/gradient shape mismatch"
            )));
        }
        if !g.is_finite() {
            return Err(Error::Divergence(format!(
                "non-finite gradient in tensor {i}"
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (T::one() - b1) * gr;
            *vi = b2 * *vi + (T::one() - b2) * gr * gr;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}
