use super::matrix::{DenseMatrix, Scalar};
use crate::error::{Error, Result};

/// Row-wise softmax with max subtraction. `-inf` entries map to exactly zero.
pub fn row_softmax<T: Scalar>(logits: &DenseMatrix<T>) -> Result<DenseMatrix<T>> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r)).map_err(|_| Error::DegenerateRow { row: r })?;
    }
    Ok(out)
}

/// Softmax over a single row. Fails when no entry is finite.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) -> std::result::Result<(), ()> {
    let mut max = T::neg_infinity();
    for &x in row.iter() {
        if x.is_nan() || x == T::infinity() {
            return Err(());
        }
        if x > max {
            max = x;
        }
    }
    if max == T::neg_infinity() {
        return Err(());
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = if *x == T::neg_infinity() {
            T::zero()
        } else {
            (*x - max).exp()
        };
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
    Ok(())
}

/// Rotary position embedding applied to adjacent feature pairs `(2m, 2m+1)`.
///
/// Row `i` is rotated by `positions[i] * base^(-2m/d)` in pair `m`.
pub fn rope_apply<T: Scalar>(
    x: &DenseMatrix<T>,
    positions: &[usize],
    base: f32,
) -> Result<DenseMatrix<T>> {
    rope_rotate(x, positions, base, false)
}

/// Rotation by the negated angles; the transpose of [`rope_apply`], used in backprop.
pub(crate) fn rope_apply_transpose<T: Scalar>(
    x: &DenseMatrix<T>,
    positions: &[usize],
    base: f32,
) -> Result<DenseMatrix<T>> {
    rope_rotate(x, positions, base, true)
}

fn rope_rotate<T: Scalar>(
    x: &DenseMatrix<T>,
    positions: &[usize],
    base: f32,
    inverse: bool,
) -> Result<DenseMatrix<T>> {
    let d = x.cols();
    if d % 2 != 0 {
        return Err(Error::Shape(format!(
            "rope needs an even feature dimension, got {d}"
        )));
    }
    if positions.len() != x.rows() {
        return Err(Error::Shape(format!(
            "{} positions for {} rows",
            positions.len(),
            x.rows()
        )));
    }
    let mut out = x.clone();
    let base = base as f64;
    for (r, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for m in 0..d / 2 {
            let theta = pos as f64 * base.powf(-2.0 * m as f64 / d as f64);
            let (s, c) = theta.sin_cos();
            let (s, c) = (T::lit(if inverse { -s } else { s }), T::lit(c));
            let (a, b) = (row[2 * m], row[2 * m + 1]);
            row[2 * m] = a * c - b * s;
            row[2 * m + 1] = a * s + b * c;
        }
    }
    Ok(out)
}

/// Weighted cross-entropy over selected rows:
/// `Σ_i w_i · (−log softmax(logits_i)[target_i]) / Σ_i w_i` for `i` in `loss_positions`.
///
/// `targets` and `weights` are indexed by row.
pub fn masked_cross_entropy<T: Scalar>(
    logits: &DenseMatrix<T>,
    targets: &[u32],
    loss_positions: &[usize],
    weights: &[T],
) -> Result<T> {
    masked_cross_entropy_with_grad(logits, targets, loss_positions, weights, false).map(|(l, _)| l)
}

/// As [`masked_cross_entropy`], also returning `∂loss/∂logits` when `want_grad`.
pub fn masked_cross_entropy_with_grad<T: Scalar>(
    logits: &DenseMatrix<T>,
    targets: &[u32],
    loss_positions: &[usize],
    weights: &[T],
    want_grad: bool,
) -> Result<(T, Option<DenseMatrix<T>>)> {
    if loss_positions.is_empty() {
        return Err(Error::EmptyLoss);
    }
    let (rows, vocab) = logits.shape();
    if targets.len() != rows || weights.len() != rows {
        return Err(Error::Shape(format!(
            "{rows} logit rows but {} targets and {} weights",
            targets.len(),
            weights.len()
        )));
    }
    let total_w: T = loss_positions.iter().map(|&i| weights[i]).sum();
    if total_w <= T::zero() {
        return Err(Error::EmptyLoss);
    }
    let mut grad = want_grad.then(|| DenseMatrix::zeros(rows, vocab));
    let mut loss = T::zero();
    for &i in loss_positions {
        if i >= rows {
            return Err(Error::Shape(format!(
                "loss position {i} outside {rows} rows"
            )));
        }
        let t = targets[i] as usize;
        if t >= vocab {
            return Err(Error::Shape(format!(
                "target id {t} outside vocabulary {vocab}"
            )));
        }
        let mut probs = logits.row(i).to_vec();
        softmax_in_place(&mut probs).map_err(|_| Error::DegenerateRow { row: i })?;
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
        loss += weights[i] * (lse - row[t]);
        if let Some(g) = grad.as_mut() {
            let scale = weights[i] / total_w;
            let g_row = g.row_mut(i);
            for (k, p) in probs.iter().enumerate() {
                g_row[k] += scale * (*p - if k == t { T::one() } else { T::zero() });
            }
        }
    }
    let loss = loss / total_w;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("non-finite loss {loss:?}")));
    }
    Ok((loss, grad))
}
