//! Forward/backward primitives for the toy transformer.
//!
//! Every forward function returns whatever its backward needs (either a cache
//! struct or the output itself); backward functions take that back together
//! with the upstream gradient. All matrices are row-major with one row per
//! sequence position.

use super::matrix::{Matrix, Real};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// `x · w + b`, with `x: n×in`, `w: in×out`, `b: 1×out`.
pub fn linear<T: Real>(x: &Matrix<T>, w: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    let mut y = x.matmul(w)?;
    y.add_row_broadcast(b)?;
    Ok(y)
}

pub struct LinearGrads<T> {
    pub dx: Matrix<T>,
    pub dw: Matrix<T>,
    pub db: Matrix<T>,
}

pub fn linear_backward<T: Real>(
    x: &Matrix<T>,
    w: &Matrix<T>,
    dy: &Matrix<T>,
) -> Result<LinearGrads<T>> {
    Ok(LinearGrads {
        dx: dy.matmul_nt(w)?,
        dw: x.matmul_tn(dy)?,
        db: dy.col_sums(),
    })
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

pub fn softmax_rows<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let mut y = x.clone();
    for r in 0..y.rows() {
        softmax_in_place(y.row_mut(r));
    }
    y
}

/// Gradient of a row softmax given its output `y`.
pub fn softmax_rows_backward<T: Real>(y: &Matrix<T>, dy: &Matrix<T>) -> Matrix<T> {
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (yr, dyr) = (y.row(r), dy.row(r));
        let inner: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((d, &a), &b) in dx.row_mut(r).iter_mut().zip(yr).zip(dyr) {
            *d = a * (b - inner);
        }
    }
    dx
}

pub fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    let total: T = row.iter().map(|&x| (x - max).exp()).sum();
    max + total.ln()
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

pub struct LayerNormCache<T> {
    xhat: Matrix<T>,
    inv_std: Vec<T>,
}

/// Row-wise layer norm with affine `gain`/`bias` (both `1×E`).
pub fn layer_norm<T: Real>(
    x: &Matrix<T>,
    gain: &Matrix<T>,
    bias: &Matrix<T>,
) -> Result<(Matrix<T>, LayerNormCache<T>)> {
    if gain.shape() != (1, x.cols()) || bias.shape() != (1, x.cols()) {
        return Err(Error::Shape {
            op: "layer_norm",
            left: x.shape(),
            right: gain.shape(),
        });
    }
    let xhat = normalize_rows(x);
    let n = T::c(x.cols() as f64);
    let eps = T::c(LN_EPS);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        inv_std.push(T::one() / (var + eps).sqrt());
    }
    let mut y = xhat.clone();
    for r in 0..y.rows() {
        for ((o, &g), &b) in y.row_mut(r).iter_mut().zip(gain.data()).zip(bias.data()) {
            *o = *o * g + b;
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Zero-mean, unit-variance rows (no affine part).
pub fn normalize_rows<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let n = T::c(x.cols() as f64);
    let eps = T::c(LN_EPS);
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

pub struct LayerNormGrads<T> {
    pub dx: Matrix<T>,
    pub dgain: Matrix<T>,
    pub dbias: Matrix<T>,
}

pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gain: &Matrix<T>,
    dy: &Matrix<T>,
) -> LayerNormGrads<T> {
    let (rows, cols) = dy.shape();
    let n = T::c(cols as f64);
    let mut dx = Matrix::zeros(rows, cols);
    let mut dgain = Matrix::zeros(1, cols);
    let mut dbias = Matrix::zeros(1, cols);
    let mut dxhat = vec![T::zero(); cols];
    for r in 0..rows {
        let (xh, dyr) = (cache.xhat.row(r), dy.row(r));
        for c in 0..cols {
            dgain.data_mut()[c] += dyr[c] * xh[c];
            dbias.data_mut()[c] += dyr[c];
            dxhat[c] = dyr[c] * gain.data()[c];
        }
        let mean_d: T = dxhat.iter().copied().sum::<T>() / n;
        let mean_dx: T = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        let inv = cache.inv_std[r];
        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = inv * (dxhat[c] - mean_d - xh[c] * mean_dx);
        }
    }
    LayerNormGrads { dx, dgain, dbias }
}

// ---------------------------------------------------------------------------
// GELU (tanh approximation)
// ---------------------------------------------------------------------------

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    let (k, a, half) = (T::c(GELU_K), T::c(GELU_A), T::c(0.5));
    let mut y = x.clone();
    for v in y.data_mut() {
        let u = *v;
        *v = half * u * (T::one() + (k * (u + a * u * u * u)).tanh());
    }
    y
}

pub fn gelu_backward<T: Real>(x: &Matrix<T>, dy: &Matrix<T>) -> Matrix<T> {
    let (k, a, half, three) = (T::c(GELU_K), T::c(GELU_A), T::c(0.5), T::c(3.0));
    let mut dx = dy.clone();
    for (d, &u) in dx.data_mut().iter_mut().zip(x.data()) {
        let t = (k * (u + a * u * u * u)).tanh();
        let dt = (T::one() - t * t) * k * (T::one() + three * a * u * u);
        *d *= half * (T::one() + t) + half * u * dt;
    }
    dx
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention
// ---------------------------------------------------------------------------

pub struct AttentionCache<T> {
    /// Attention probabilities, one `n×m` matrix per head.
    probs: Vec<Matrix<T>>,
}

fn head_slices<T: Real>(x: &Matrix<T>, heads: usize) -> Vec<Matrix<T>> {
    let d = x.cols() / heads;
    (0..heads).map(|h| x.col_slice(h * d, d)).collect()
}

/// Multi-head attention of queries `q: n×E` over keys/values `k, v: m×E`.
///
/// With `causal`, query `i` only attends to keys `0..=i`.
pub fn attention<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    heads: usize,
    causal: bool,
) -> Result<(Matrix<T>, AttentionCache<T>)> {
    if q.cols() != k.cols() || k.shape() != v.shape() || heads == 0 || q.cols() % heads != 0 {
        return Err(Error::Shape {
            op: "attention",
            left: q.shape(),
            right: k.shape(),
        });
    }
    let d = q.cols() / heads;
    let scale = T::c(1.0 / (d as f64).sqrt());
    let (qh, kh, vh) = (head_slices(q, heads), head_slices(k, heads), head_slices(v, heads));
    let mut out = Matrix::zeros(q.rows(), q.cols());
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let mut s = qh[h].matmul_nt(&kh[h])?;
        s.scale(scale);
        if causal {
            for i in 0..s.rows() {
                for j in (i + 1)..s.cols() {
                    s.set(i, j, T::neg_infinity());
                }
            }
        }
        let p = softmax_rows(&s);
        out.add_into_cols(h * d, &p.matmul(&vh[h])?);
        probs.push(p);
    }
    Ok((out, AttentionCache { probs }))
}

pub struct AttentionGrads<T> {
    pub dq: Matrix<T>,
    pub dk: Matrix<T>,
    pub dv: Matrix<T>,
}

pub fn attention_backward<T: Real>(
    cache: &AttentionCache<T>,
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    dout: &Matrix<T>,
) -> Result<AttentionGrads<T>> {
    let heads = cache.probs.len();
    let d = q.cols() / heads;
    let scale = T::c(1.0 / (d as f64).sqrt());
    let (qh, kh, vh) = (head_slices(q, heads), head_slices(k, heads), head_slices(v, heads));
    let douth = head_slices(dout, heads);
    let mut dq = Matrix::zeros(q.rows(), q.cols());
    let mut dk = Matrix::zeros(k.rows(), k.cols());
    let mut dv = Matrix::zeros(v.rows(), v.cols());
    for h in 0..heads {
        let p = &cache.probs[h];
        dv.add_into_cols(h * d, &p.matmul_tn(&douth[h])?);
        let dp = douth[h].matmul_nt(&vh[h])?;
        let mut ds = softmax_rows_backward(p, &dp);
        ds.scale(scale);
        dq.add_into_cols(h * d, &ds.matmul(&kh[h])?);
        dk.add_into_cols(h * d, &ds.matmul_tn(&qh[h])?);
    }
    Ok(AttentionGrads { dq, dk, dv })
}

// ---------------------------------------------------------------------------
// Cross-entropy
// ---------------------------------------------------------------------------

/// Mean cross-entropy over rows of `logits` against class indices.
///
/// Returns the loss and its gradient with respect to the logits.
pub fn cross_entropy<T: Real>(logits: &Matrix<T>, targets: &[usize]) -> Result<(T, Matrix<T>)> {
    if logits.rows() != targets.len() || logits.rows() == 0 {
        return Err(Error::Shape {
            op: "cross_entropy",
            left: logits.shape(),
            right: (targets.len(), 1),
        });
    }
    let n = T::c(logits.rows() as f64);
    let mut loss = T::zero();
    let mut grad = softmax_rows(logits);
    for (r, &t) in targets.iter().enumerate() {
        if t >= logits.cols() {
            return Err(Error::Shape {
                op: "cross_entropy target",
                left: logits.shape(),
                right: (r, t),
            });
        }
        loss += log_sum_exp(logits.row(r)) - logits.get(r, t);
        let row = grad.row_mut(r);
        row[t] -= T::one();
        for g in row.iter_mut() {
            *g /= n;
        }
    }
    Ok((loss / n, grad))
}

// ---------------------------------------------------------------------------
// Embedding gather
// ---------------------------------------------------------------------------

/// Gathers columns of an `E×U` table into a `K×E` row-per-token matrix.
pub fn gather_columns<T: Real>(table: &Matrix<T>, cols: &[usize]) -> Result<Matrix<T>> {
    let e = table.rows();
    let mut out = Matrix::zeros(cols.len(), e);
    for (k, &c) in cols.iter().enumerate() {
        if c >= table.cols() {
            return Err(Error::Shape {
                op: "gather_columns",
                left: table.shape(),
                right: (k, c),
            });
        }
        for r in 0..e {
            out.set(k, r, table.get(r, c));
        }
    }
    Ok(out)
}

/// Scatter-adds `K×E` row gradients back into an `E×U` table gradient.
pub fn scatter_columns<T: Real>(dtable: &mut Matrix<T>, cols: &[usize], drows: &Matrix<T>) {
    for (k, &c) in cols.iter().enumerate() {
        for r in 0..dtable.rows() {
            let v = dtable.get(r, c) + drows.get(k, r);
            dtable.set(r, c, v);
        }
    }
}

// ---------------------------------------------------------------------------
// Positional encodings
// ---------------------------------------------------------------------------

/// Sinusoidal encoding for an arbitrary (possibly fractional) position.
pub fn sinusoid<T: Real>(position: f64, dim: usize, out: &mut [T]) {
    for i in 0..dim / 2 {
        let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = T::c((position * freq).sin());
        out[2 * i + 1] = T::c((position * freq).cos());
    }
    if dim % 2 == 1 {
        out[dim - 1] = T::zero();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let y = softmax_rows(&Matrix::<f64>::zeros(1, 3));
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Matrix::<f64>::from_fn(5, 7, |r, c| ((r * 7 + c) as f64).sin() * 30.0);
        let y = softmax_rows(&x);
        for r in 0..5 {
            assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let x = Matrix::<f64>::filled(2, 6, 0.1);
        let (y, _) = layer_norm(&x, &Matrix::filled(1, 6, 1.0), &Matrix::zeros(1, 6)).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12), "{y:?}");
    }

    #[test]
    fn cross_entropy_closed_form() {
        // ln(e^2 + 2) - 2 = ln(1 + 2e^-2)
        let logits = Matrix::<f64>::from_vec(1, 3, vec![2.0, 0.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[0]).unwrap();
        let expected = (1.0 + 2.0 * (-2.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-14);
        assert!((loss - 0.2395).abs() < 5e-5);
    }

    #[test]
    fn cross_entropy_vanishes_for_confident_correct_logits() {
        let logits = Matrix::<f64>::from_vec(1, 3, vec![60.0, 0.0, 0.0]).unwrap();
        let (loss, _) = cross_entropy(&logits, &[0]).unwrap();
        assert!(loss < 1e-25);
    }

    #[test]
    fn causal_attention_ignores_future_keys() {
        let q = Matrix::<f64>::from_fn(3, 4, |r, c| (r + c) as f64 * 0.1);
        let mut k = Matrix::<f64>::from_fn(3, 4, |r, c| (r * c) as f64 * 0.2);
        let v = Matrix::<f64>::from_fn(3, 4, |r, c| (r as f64) - c as f64);
        let (a, _) = attention(&q, &k, &v, 2, true).unwrap();
        k.set(2, 1, 100.0);
        let (b, _) = attention(&q, &k, &v, 2, true).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
    }

    #[test]
    fn gather_then_scatter_is_adjoint() {
        let table = Matrix::<f64>::from_fn(3, 4, |r, c| (r * 4 + c) as f64);
        let g = gather_columns(&table, &[2, 0, 2]).unwrap();
        assert_eq!(g.row(0), &[2.0, 6.0, 10.0]);
        assert_eq!(g.row(2), g.row(0));
        let mut d = Matrix::zeros(3, 4);
        scatter_columns(&mut d, &[2, 0, 2], &Matrix::filled(3, 3, 1.0));
        assert_eq!(d.column(2), vec![2.0; 3]);
        assert_eq!(d.column(1), vec![0.0; 3]);
    }
}
