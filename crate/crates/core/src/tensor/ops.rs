//! Eager kernels shared by the differentiation graph and the inference path.

use super::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `c = a·b + beta·c` on row-major buffers. `a` is logically `m×k` and `b`
/// is logically `k×n`; the transpose flags say the buffer holds the
/// transposed matrix instead (`k×m` or `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m <= 8 && !a_trans && !b_trans {
        // Packing the whole of `b` dominates for a handful of rows; stream it instead.
        for (i, crow) in c.chunks_mut(n).enumerate() {
            if beta == 0.0 {
                crow.fill(0.0);
            } else if beta != 1.0 {
                crow.iter_mut().for_each(|v| *v *= beta);
            }
            for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
                for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *cv += aip * bv;
                }
            }
        }
        return;
    }
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above bound every index the kernel touches for the
    // given strides, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, 0.0);
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let src = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

/// Adds a length-`d` vector to every row of a `...×d` tensor.
pub fn add_row(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let d = x.last_dim();
    if bias.numel() != d {
        return Err(Error::Shape {
            op: "add_row",
            lhs: x.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let b = bias.data();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        for (o, bv) in row.iter_mut().zip(b) {
            *o += bv;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub fn scale(x: &Tensor, s: f64) -> Tensor {
    x.map(|v| v * s)
}

pub fn relu_sq(x: &Tensor) -> Tensor {
    x.map(relu_sq_scalar)
}

#[inline]
pub fn relu_sq_scalar(t: f64) -> f64 {
    let r = t.max(0.0);
    r * r
}

/// Row-wise softmax with max subtraction.
///
/// Entries equal to `-inf` act as masked positions and receive probability
/// zero; every row needs at least one finite entry. NaN or `+inf` is an error.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let d = x.last_dim();
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        softmax_in_place(row)?;
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

pub(crate) fn softmax_in_place(row: &mut [f64]) -> Result<()> {
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v.is_nan() || v == f64::INFINITY {
            return Err(Error::Numeric {
                op: "softmax_rows",
                detail: format!("non-finite input {v}"),
            });
        }
        max = max.max(v);
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::Numeric {
            op: "softmax_rows",
            detail: "row is fully masked".into(),
        });
    }
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
    Ok(())
}

/// Normalized values and reciprocal standard deviations, kept for backward.
pub(crate) struct LayerNormParts {
    pub out: Vec<f64>,
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_parts(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<LayerNormParts> {
    let d = x.last_dim();
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: x.shape().to_vec(),
            rhs: gain.shape().to_vec(),
        });
    }
    if eps <= 0.0 {
        return Err(Error::contract("layer_norm eps must be positive"));
    }
    let rows = x.numel() / d;
    let (g, b) = (gain.data(), bias.data());
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let src = &x.data()[r * d..(r + 1) * d];
        let mean = src.iter().sum::<f64>() / d as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        rstd[r] = inv;
        for j in 0..d {
            let h = (src[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = h * g[j] + b[j];
        }
    }
    Ok(LayerNormParts { out, xhat, rstd })
}

/// Layer normalization over the last axis with an elementwise affine.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let parts = layer_norm_parts(x, gain, bias, eps)?;
    Ok(Tensor::from_parts(x.shape().to_vec(), parts.out))
}

/// Rotary embedding on an `n×d` tensor: the pair `(2i, 2i+1)` of row `r`
/// is rotated by `positions[r]·base^(-2i/d)`. `inverse` rotates the other way.
pub fn rope(x: &Tensor, positions: &[usize], base: f64, inverse: bool) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if d % 2 != 0 {
        return Err(Error::config(format!("rotary dimension {d} must be even")));
    }
    if positions.len() != n {
        return Err(Error::Shape {
            op: "rope",
            lhs: x.shape().to_vec(),
            rhs: vec![positions.len()],
        });
    }
    let sign = if inverse { -1.0 } else { 1.0 };
    let freqs = rope_frequencies(d, base);
    let mut out = x.data().to_vec();
    for (r, &pos) in positions.iter().enumerate() {
        let row = &mut out[r * d..(r + 1) * d];
        for (i, freq) in freqs.iter().enumerate() {
            let angle = pos as f64 * freq;
            let (sin, cos) = (sign * angle).sin_cos();
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * cos - b * sin;
            row[2 * i + 1] = a * sin + b * cos;
        }
    }
    Ok(Tensor::from_parts(vec![n, d], out))
}

pub(crate) fn rope_frequencies(d: usize, base: f64) -> Vec<f64> {
    (0..d / 2)
        .map(|i| base.powf(-2.0 * i as f64 / d as f64))
        .collect()
}

/// `log Σ exp(row)` with max subtraction.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}
