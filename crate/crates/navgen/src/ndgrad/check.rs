//! Central finite-difference verification of tape gradients.
//!
//! [`grad_check`] runs a scalar-valued function twice per parameter
//! component — once at `+h`, once at `-h` — and compares the secant slope
//! against the gradient the tape produced analytically. It is O(P) forward
//! passes for P parameter scalars, so callers keep the test functions small.

use super::{ParamStore, Tape, Tensor};
use crate::error::{NavError, Result};

/// Maximum relative error between analytic and central-difference gradients
/// over every component of every parameter in `store`.
///
/// `f` must build a scalar loss from scratch on the tape it is given;
/// it is called once for the analytic pass and twice per component for the
/// numeric ones. Relative error is `|a - n| / max(1, |a|, |n|)`, which
/// behaves like absolute error near zero and like relative error for large
/// gradients.
pub fn grad_check<F>(store: &ParamStore, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Tensor>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(NavError::Numerical(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    // Analytic pass.
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss)?;
    let analytic = tape.param_grads();

    let eval = |st: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, st)?;
        tape.value(loss).item()
    };

    let mut max_rel = 0.0f64;
    for name in store.names() {
        let dims = store.get(name)?.numel();
        // A parameter the loss never touched legitimately has no gradient
        // entry; treat it as zero and still verify against the numerics.
        let zero_len = analytic.get(name).map_or(dims, |a| a.numel());
        if zero_len != dims {
            return Err(NavError::Shape {
                op: "grad_check",
                lhs: vec![zero_len],
                rhs: vec![dims],
            });
        }
        for i in 0..dims {
            let mut plus = store.clone();
            plus.get_mut(name)?.data_mut()[i] += h;
            let mut minus = store.clone();
            minus.get_mut(name)?.data_mut()[i] -= h;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let a = analytic.get(name).map_or(0.0, |arr| arr.data()[i]);
            let denom = 1.0f64.max(a.abs()).max(numeric.abs());
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
