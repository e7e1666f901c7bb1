//! Grid arithmetic, seeded randomness and reverse-mode gradients.

mod gradcheck;
mod grid;
mod kernels;
mod optim;
mod rng;
mod tape;

pub use gradcheck::{grad_check, grad_check_piecewise, PiecewiseCheck, KINK_TOL};
pub use grid::FloatGrid;
pub use optim::{Adam, SgdMomentum};
pub use rng::{gaussian, Rng, DEFAULT_STREAM};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};

/// `[m, k] x [k, n]`.
pub fn matmul(a: &FloatGrid, b: &FloatGrid) -> Result<FloatGrid> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    Ok(kernels::matmul(a, b))
}

/// Zero-padded 3x3 convolution of a `[Ci, H, W]` input with `[Co, Ci, 3, 3]` weights.
pub fn conv2d_3x3(
    input: &FloatGrid,
    weight: &FloatGrid,
    bias: Option<&FloatGrid>,
    stride: usize,
) -> Result<FloatGrid> {
    let ok = input.rank() == 3
        && weight.rank() == 4
        && weight.shape()[1] == input.shape()[0]
        && weight.shape()[2..] == [3, 3]
        && bias.is_none_or(|b| b.shape() == [weight.shape()[0]])
        && stride >= 1;
    if !ok {
        return Err(Error::shape("conv2d_3x3", weight.shape(), input.shape()));
    }
    Ok(kernels::conv3x3(input, weight, bias, stride))
}

pub fn softmax_rows(x: &FloatGrid) -> Result<FloatGrid> {
    if x.rank() != 2 {
        return Err(Error::shape("softmax_rows", &[0, 0], x.shape()));
    }
    Ok(kernels::softmax_rows(x))
}

/// Cosine similarity of two equal-length grids. A zero-norm argument
/// yields 0 and logs a warning.
pub fn cosine(a: &FloatGrid, b: &FloatGrid) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine", &[a.len()], &[b.len()]));
    }
    Ok(kernels::cosine(a, b))
}

/// Rows rescaled to unit L2 norm.
pub fn normalize_rows(x: &FloatGrid) -> FloatGrid {
    kernels::normalize_rows(x)
}

pub fn spatial_mean(x: &FloatGrid) -> FloatGrid {
    kernels::spatial_mean(x)
}
