//! Minimal differentiable computation: dense tensors, a recording tape with
//! reverse accumulation, and a central-difference gradient checker.
//!
//! Everything runs in `f64`. Matrix products go through `matrixmultiply`.

mod gradcheck;
mod tape;
mod tensor;

use thiserror::Error;

pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("value is not recorded on this tape")]
    Unrecorded,
    #[error("backward needs a one-element output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("finite-difference step {0} outside [1e-6, 1e-3]")]
    InvalidStep(f64),
}

/// `C[m, n] = A[m, k] · B[k, n] + beta · C` with explicit (row, col) strides
/// for `A` and `B` and row stride `rsc` for `C`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

pub fn elu_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

/// ELU (α = 1) applied entry-wise.
pub fn elu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| elu_scalar(v)).collect()
}

/// `W·x + b` for a matrix `w: [out, in]`.
pub fn linear(w: &Tensor, b: &[f64], x: &[f64]) -> Result<Vec<f64>, NnError> {
    if w.shape().len() != 2 || w.shape()[1] != x.len() || w.shape()[0] != b.len() {
        return Err(NnError::ShapeMismatch {
            op: "linear",
            detail: format!("W {:?}, b [{}], x [{}]", w.shape(), b.len(), x.len()),
        });
    }
    Ok((0..b.len())
        .map(|o| b[o] + w.row(o).iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
        .collect())
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
