//! Central finite-difference checking of tape gradients.

use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Evaluates a tape-built scalar function at a point.
fn eval_at<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let loss = f(&mut tape, xv)?;
    let value = tape.value(loss);
    if value.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check requires a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::Eval(format!("non-finite function value {v}")));
    }
    Ok(v)
}

/// Max relative error between the analytic gradient of `f` at `x` and
/// central finite differences over the given coordinates.
///
/// Relative error per coordinate is
/// `|analytic - central| / (|central| + 1e-12)`.
pub fn finite_diff_check_coords<F>(f: &F, x: &Tensor, eps: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let loss = f(&mut tape, xv)?;
    if tape.value(loss).numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient check requires a scalar function, got shape {:?}",
            tape.value(loss).shape()
        )));
    }
    if !tape.value(loss).item().is_finite() {
        return Err(Error::Eval("non-finite function value".into()));
    }
    tape.backward(loss)?;
    let analytic = tape.grad_tensor(xv);

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for &i in coords {
        if i >= x.numel() {
            return Err(Error::Contract(format!(
                "coordinate {i} out of bounds for {} elements",
                x.numel()
            )));
        }
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval_at(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval_at(f, &probe)?;
        probe.data_mut()[i] = orig;
        let central = (fp - fm) / (2.0 * eps);
        let err = (analytic.data()[i] - central).abs() / (central.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// [`finite_diff_check_coords`] over every coordinate of `x`.
pub fn finite_diff_check<F>(f: &F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    finite_diff_check_coords(f, x, eps, &coords)
}
