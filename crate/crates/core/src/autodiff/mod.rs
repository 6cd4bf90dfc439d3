//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod params;
mod tape;

pub use gradcheck::{
    finite_diff_check, relative_error, EntryCheck, GradCheckReport, REL_ERR_FLOOR,
};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{sigmoid_value, softmax_along, Gradients, Tape, Var};

use crate::error::Result;
use crate::tensor::Tensor;

/// Layer normalisation over the feature axis of an `n×d` matrix, composed
/// from primitive tape ops. `gain` and `bias` are `1×d`.
pub fn layer_norm(tape: &mut Tape, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
    let (n, d) = (tape.value(x).rows(), tape.value(x).cols());
    let mu = tape.row_means(x)?;
    let mu = tape.repeat_cols(mu, d)?;
    let centered = tape.sub(x, mu)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.row_means(sq)?;
    let var = tape.add_scalar(var, eps);
    let inv_std = tape.powf(var, -0.5);
    let inv_std = tape.repeat_cols(inv_std, d)?;
    let normed = tape.mul(centered, inv_std)?;
    let gain = tape.repeat_rows(gain, n)?;
    let bias = tape.repeat_rows(bias, n)?;
    let scaled = tape.mul(normed, gain)?;
    tape.add(scaled, bias)
}

/// `x·w + b` for `x: n×k`, `w: k×m`, `b: 1×m`.
pub fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let n = tape.value(x).rows();
    let xw = tape.matmul(x, w)?;
    let b = tape.repeat_rows(b, n)?;
    tape.add(xw, b)
}

/// Adds a constant (non-differentiable) tensor to `x`.
pub fn add_const(tape: &mut Tape, x: Var, c: Tensor) -> Result<Var> {
    let c = tape.constant(c);
    tape.add(x, c)
}
