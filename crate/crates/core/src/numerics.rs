//! Dense kernels with hand-written backward passes.
//!
//! Matrices are row-major `[rows × cols]` views over [`Tensor`]. Weight
//! matrices follow the `[out × in]` convention, so a linear layer is
//! `y = x · Wᵀ` (see [`linear`]).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const ROPE_BASE: f64 = 10_000.0;

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn expect_matrix<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "{what} must be a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `a [m×k] · b [k×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = expect_matrix(a, "lhs")?;
    let (k2, n) = expect_matrix(b, "rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents {k} vs {k2}"
        )));
    }
    Ok(mm(a.data(), b.data(), m, k, n))
}

/// Gradients of `a · b` with respect to `a` and `b`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = expect_matrix(a, "lhs")?;
    let (k2, n) = expect_matrix(b, "rhs")?;
    if k != k2 || grad_out.shape() != [m, n] {
        return Err(Error::Dimension(format!(
            "matmul backward: a {:?}, b {:?}, grad {:?}",
            a.shape(),
            b.shape(),
            grad_out.shape()
        )));
    }
    // dA = G·Bᵀ, dB = Aᵀ·G
    let ga = mm_nt(grad_out.data(), b.data(), m, n, k);
    let gb = mm_tn(a.data(), grad_out.data(), m, k, n);
    Ok((ga, gb))
}

// a [m×k] · b [k×n]
fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_raw(vec![m, n], out)
}

// a [m×k] · b[n×k]ᵀ
fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    Tensor::from_raw(vec![m, n], out)
}

// a[m×k]ᵀ · b[m×n] -> [k×n]
fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::from_raw(vec![k, n], out)
}

/// `y = x · Wᵀ` for `x [.. × in]` and `w [out × in]`; leading extents of
/// `x` are preserved.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (out_dim, in_dim) = expect_matrix(w, "weight")?;
    if x.cols() != in_dim {
        return Err(Error::Dimension(format!(
            "linear: input width {} vs weight {:?}",
            x.cols(),
            w.shape()
        )));
    }
    let y = mm_nt(x.data(), w.data(), x.rows(), in_dim, out_dim);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_dim;
    y.reshape(&shape)
}

/// Backward of [`linear`]: returns `(dx, dW)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (out_dim, in_dim) = expect_matrix(w, "weight")?;
    if grad_out.cols() != out_dim || x.cols() != in_dim || x.rows() != grad_out.rows() {
        return Err(Error::Dimension("linear backward shapes".into()));
    }
    let rows = x.rows();
    let dx = mm(grad_out.data(), w.data(), rows, out_dim, in_dim).reshape(x.shape())?;
    let dw = mm_tn(grad_out.data(), x.data(), rows, out_dim, in_dim);
    Ok((dx, dw))
}

/// Saved state of a layer-norm forward.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::Dimension(format!(
            "layer_norm width {d}, gain {:?}, bias {:?}",
            gain.shape(),
            bias.shape()
        )));
    }
    if eps <= T::zero() {
        return Err(Error::Config("layer_norm eps must be positive".into()));
    }
    let n = T::from_usize(d);
    let mut y = Tensor::zeros(x.shape());
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(r);
        for (h, &v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * is;
        }
        let yr = y.row_mut(r);
        for i in 0..d {
            yr[i] = xhat.row(r)[i] * gain.data()[i] + bias.data()[i];
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gain: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    cache.xhat.expect_same_shape(grad_out)?;
    let d = grad_out.cols();
    let n = T::from_usize(d);
    let mut dx = Tensor::zeros(grad_out.shape());
    let mut dgain = Tensor::zeros(&[d]);
    let mut dbias = Tensor::zeros(&[d]);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..grad_out.rows() {
        let g = grad_out.row(r);
        let xh = cache.xhat.row(r);
        for i in 0..d {
            dgain.data_mut()[i] += g[i] * xh[i];
            dbias.data_mut()[i] += g[i];
            dxhat[i] = g[i] * gain.data()[i];
        }
        let mean_dxhat = dxhat.iter().copied().sum::<T>() / n;
        let mean_dxhat_xhat = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        let is = cache.inv_std[r];
        let out = dx.row_mut(r);
        for i in 0..d {
            out[i] = is * (dxhat[i] - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
    Ok((dx, dgain, dbias))
}

/// Row-wise softmax over the last extent. `-∞` entries are masked and map to
/// exactly zero; a row with no finite entry is an error.
pub fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = Tensor::zeros(x.shape());
    for r in 0..x.rows() {
        softmax_into(x.row(r), out.row_mut(r)).map_err(|_| Error::MaskedRow { row: r })?;
    }
    Ok(out)
}

pub(crate) fn softmax_into<T: Scalar>(x: &[T], out: &mut [T]) -> std::result::Result<(), ()> {
    let max = x
        .iter()
        .copied()
        .filter(|v| *v != T::neg_infinity())
        .fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return Err(());
    }
    let mut z = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = if v == T::neg_infinity() {
            T::zero()
        } else {
            (v - max).exp()
        };
        z += *o;
    }
    for o in out.iter_mut() {
        *o = *o / z;
    }
    Ok(())
}

#[inline]
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
pub fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

/// Exact-erf GELU.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

pub fn gelu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(grad_out, |v, g| g * gelu_grad_scalar(v))
}

/// Rotary position encoding over interleaved pairs `(2i, 2i+1)` of each head,
/// with angle `pos · base^(−2i/d_k)`.
///
/// `x` is `[S × H × d_k]` (or `[S × H·d_k]` with `heads` given by the caller
/// through [`rope_rotate_heads`]).
pub fn rope_rotate<T: Scalar>(x: &Tensor<T>, positions: &[usize]) -> Result<Tensor<T>> {
    if x.shape().len() != 3 {
        return Err(Error::Dimension(format!(
            "rope expects [S×H×d_k], got {:?}",
            x.shape()
        )));
    }
    let heads = x.shape()[1];
    let flat = x.clone().reshape(&[x.shape()[0], heads * x.shape()[2]])?;
    rope_rotate_heads(&flat, heads, positions, false)?.reshape(x.shape())
}

/// Rotates each `d_k` slice of an `[S × H·d_k]` tensor. `inverse` applies
/// the transpose rotation, which is the backward pass.
pub fn rope_rotate_heads<T: Scalar>(
    x: &Tensor<T>,
    heads: usize,
    positions: &[usize],
    inverse: bool,
) -> Result<Tensor<T>> {
    let width = x.cols();
    if heads == 0 || width % heads != 0 {
        return Err(Error::Dimension(format!(
            "width {width} not divisible into {heads} heads"
        )));
    }
    let dk = width / heads;
    if dk % 2 != 0 {
        return Err(Error::Dimension(format!("rope needs even head dim, got {dk}")));
    }
    if positions.len() != x.rows() {
        return Err(Error::Dimension(format!(
            "{} positions for {} rows",
            positions.len(),
            x.rows()
        )));
    }
    let freqs: Vec<f64> = (0..dk / 2)
        .map(|i| ROPE_BASE.powf(-(2.0 * i as f64) / dk as f64))
        .collect();
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for h in 0..heads {
            for (i, &f) in freqs.iter().enumerate() {
                let angle = sign * pos as f64 * f;
                let (sin, cos) = (T::lit(angle.sin()), T::lit(angle.cos()));
                let a = h * dk + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * cos - x1 * sin;
                row[a + 1] = x0 * sin + x1 * cos;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let x = t(&[2, 2], &[1.5, -2.0, 0.25, 4.0]);
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&id, &x).unwrap(), x);
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 1.0]);
        assert_eq!(matmul(&a, &b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn linear_matches_matmul_with_transpose() {
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 2.0]);
        let w = t(&[2, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6]);
        let wt = t(&[3, 2], &[0.1, -0.4, 0.2, 0.5, 0.3, -0.6]);
        assert!(linear(&x, &w).unwrap().max_abs_diff(&matmul(&x, &wt).unwrap()) < 1e-15);
    }

    #[test]
    fn layer_norm_cases() {
        let ones = t(&[2], &[1.0, 1.0]);
        let zeros = t(&[2], &[0.0, 0.0]);
        let (y, _) = layer_norm(&t(&[1, 2], &[1.0, 3.0]), &ones, &zeros, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
        let g3 = t(&[3], &[1.0; 3]);
        let b3 = t(&[3], &[0.0; 3]);
        let (y, _) = layer_norm(&t(&[1, 3], &[5.0; 3]), &g3, &b3, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(layer_norm(&t(&[1, 3], &[5.0; 3]), &ones, &zeros, 1e-5).is_err());
    }

    #[test]
    fn softmax_cases() {
        let y = softmax_rows(&t(&[1, 3], &[0.0; 3])).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let masked = Tensor::from_raw(vec![1, 2], vec![0.0, f64::NEG_INFINITY]);
        assert_eq!(softmax_rows(&masked).unwrap().data(), &[1.0, 0.0]);
        let y = softmax_rows(&t(&[1, 2], &[1f64.ln(), 3f64.ln()])).unwrap();
        assert!((y.data()[0] - 0.25).abs() < 1e-15 && (y.data()[1] - 0.75).abs() < 1e-15);
        let dead = Tensor::from_raw(vec![2, 2], vec![0.0, 1.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert!(matches!(softmax_rows(&dead), Err(Error::MaskedRow { row: 1 })));
    }

    #[test]
    fn gelu_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-6);
        assert!((gelu_scalar(1.0f64) - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn rope_position_zero_is_identity_and_odd_dim_fails() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 4], |i| i as f64 * 0.3 - 1.0);
        assert_eq!(rope_rotate(&x, &[0]).unwrap(), x);
        let odd = Tensor::<f64>::zeros(&[1, 1, 3]);
        assert!(rope_rotate(&odd, &[0]).is_err());
    }

    #[test]
    fn rope_inverse_undoes_rotation() {
        let x = Tensor::<f64>::from_fn(&[3, 8], |i| (i as f64 * 0.7).sin());
        let pos = [0, 5, 17];
        let y = rope_rotate_heads(&x, 2, &pos, false).unwrap();
        let back = rope_rotate_heads(&y, 2, &pos, true).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }
}
