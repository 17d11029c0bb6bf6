//! Dense `f64` tensors with tape-based reverse-mode differentiation.
//!
//! Every learnable computation in the crate is recorded on a [`Tape`]:
//! operations append nodes in execution order, and [`Tape::backward`]
//! walks them once in reverse, accumulating vector-Jacobian products.
//! There is no broadcasting beyond scalar constants.

mod kernels;
mod tape;
mod tensor;

pub use tape::{BatchStats, Elementwise, Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
pub(crate) use tape::sigmoid;

use crate::error::{Error, Result};

/// Compares the tape gradient of a scalar function with central differences.
///
/// Returns the largest `|analytic - numeric| / max(1, |numeric|)` over all
/// coordinates of `x`.
pub fn gradcheck<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(
            "gradcheck",
            format!("eps must lie in (0, 1e-2], got {eps}"),
        ));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    if !tape.value(out).all_finite() {
        return Err(Error::NonFinite("gradcheck: function value".into()));
    }
    let analytic = tape.backward(out)?.get(xv);
    if !analytic.all_finite() {
        return Err(Error::NonFinite("gradcheck: analytic gradient".into()));
    }

    let eval = |probe: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(probe);
        let out = f(&mut tape, v)?;
        let value = tape.value(out).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(
                "gradcheck: perturbed function value".into(),
            ));
        }
        Ok(value)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
