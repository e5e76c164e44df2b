//! Dense `f64` tensors, a reverse-mode tape, and a finite-difference oracle.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{central_difference, finite_diff_gradient, relative_error};
pub use tape::{Tape, Var};
pub use tensor::{ParamId, ParamStore, Tensor};

use crate::error::{DegapError, Result};

pub const DEFAULT_LAYER_NORM_EPS: f64 = 1e-5;

fn require_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        &[r, c] => Ok((r, c)),
        other => Err(DegapError::Dimension {
            op,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

/// Matrix product of `a: [m×k]` and `b: [k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("matmul", a)?;
    let (kb, n) = require_2d("matmul", b)?;
    if k != kb {
        return Err(DegapError::Dimension {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    kernels::gemm(m, k, n, &a.data, false, &b.data, false, &mut out, 0.0);
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = x.cols();
    if c > 0 {
        out.data.chunks_mut(c).for_each(kernels::softmax_in_place);
    }
    out
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    out.data.iter_mut().for_each(|v| *v = kernels::sigmoid(*v));
    out
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (r, c) = require_2d("layer_norm", x)?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(DegapError::Dimension {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gamma.shape.clone(),
        });
    }
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let dst = &mut out.data[i * c..(i + 1) * c];
        kernels::normalize_row(&x.data[i * c..(i + 1) * c], dst, eps);
        for j in 0..c {
            dst[j] = dst[j] * gamma.data[j] + beta.data[j];
        }
    }
    Ok(out)
}

/// Arithmetic mean of the rows listed in `positions`.
pub fn mean_pool_rows(x: &Tensor, positions: &[usize]) -> Result<Tensor> {
    let (r, c) = require_2d("mean_pool_rows", x)?;
    if positions.is_empty() {
        return Err(DegapError::contract("mean_pool_rows over an empty position set"));
    }
    let mut out = vec![0.0; c];
    for &p in positions {
        if p >= r {
            return Err(DegapError::contract(format!("pool position {p} out of range for {r} rows")));
        }
        out.iter_mut().zip(x.row(p)).for_each(|(o, v)| *o += v);
    }
    let inv = 1.0 / positions.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::vector(out))
}
