//! Central finite-difference verification of tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// Coordinate at which the worst error occurred.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the tape gradient of `f` at `point` against central differences.
///
/// The per-coordinate error is `|a - n| / max(1e-8, |a| + |n|)`.
pub fn finite_difference_check<F>(f: F, point: &Tensor<f64>, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let eval = |p: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p);
        let y = f(&mut tape, x)?;
        let v = tape.value(y).item()?;
        if !v.is_finite() {
            return Err(Error::NonFinite("finite-difference objective".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    if !tape.value(y).item()?.is_finite() {
        return Err(Error::NonFinite("finite-difference objective".into()));
    }
    let analytic = if tape.requires_grad(y) {
        let grads = tape.backward(y)?;
        grads
            .get(x)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; point.numel()])
    } else {
        // f does not depend on its input
        vec![0.0; point.numel()]
    };

    let mut numeric = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * step));
    }

    let (mut worst, mut worst_index) = (0.0f64, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
        if err > worst {
            worst = err;
            worst_index = i;
        }
    }
    Ok(GradCheck {
        max_relative_error: worst,
        worst_index,
        analytic,
        numeric,
    })
}
