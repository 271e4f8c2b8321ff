//! Dense matrices, softmax, rotary embeddings, loss, Adam and a
//! finite-difference gradient oracle.

mod matrix;
mod ops;
mod optim;
mod rng;

pub use matrix::{matmul, DenseMatrix, Scalar};
pub(crate) use matrix::{matmul_nt, matmul_tn_acc};
pub use ops::{masked_cross_entropy, masked_cross_entropy_with_grad, rope_apply, row_softmax};
pub(crate) use ops::{rope_apply_transpose, softmax_in_place};
pub use optim::{adam_step, OptimizerState};
pub use rng::RngState;

/// Central-difference gradient `(f(x+h) − f(x−h)) / 2h` for every coordinate of `params`.
pub fn finite_diff_gradient<T, F>(mut loss_fn: F, params: &[T], perturbation: T) -> Vec<T>
where
    T: Scalar,
    F: FnMut(&[T]) -> T,
{
    assert!(perturbation > T::zero(), "perturbation must be positive");
    let mut x = params.to_vec();
    let two_h = perturbation + perturbation;
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + perturbation;
            let up = loss_fn(&x);
            x[i] = orig - perturbation;
            let down = loss_fn(&x);
            x[i] = orig;
            (up - down) / two_h
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_gradient(|x: &[f64]| x[0] * x[0], &[3.0], 1e-3);
        assert!((g[0] - 6.0).abs() < 1e-5);
    }

    #[test]
    fn quadratic_form_matches_analytic() {
        // f(x) = xᵀAx with symmetric A: ∇f = 2Ax
        let a = [[2.0, 0.5, -1.0], [0.5, 1.0, 0.3], [-1.0, 0.3, 3.0]];
        let f = |x: &[f64]| {
            let mut s = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    s += x[i] * a[i][j] * x[j];
                }
            }
            s
        };
        let x = [0.7, -1.2, 0.4];
        let g = finite_diff_gradient(f, &x, 1e-4);
        for i in 0..3 {
            let analytic: f64 = 2.0 * (0..3).map(|j| a[i][j] * x[j]).sum::<f64>();
            assert!((g[i] - analytic).abs() < 1e-4);
        }
    }
}
