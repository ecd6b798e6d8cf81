//! Central finite-difference checks of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// flat index of the worst entry
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

/// Compares the tape gradient of `f` at `point` with central differences of step `h`.
/// `f` receives a fresh tape and the input as a trainable leaf, and must return a scalar.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let loss = f(&mut tape, x)?;
    if tape.value(loss).shape() != (1, 1) {
        return Err(Error::Shape {
            op: "grad_check",
            detail: "function must return a scalar".into(),
        });
    }
    let analytic = tape.backward(loss)?.get_or_zeros(&tape, x).into_data();

    let eval = |p: &Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(p.clone());
        let out = f(&mut t, v)?;
        Ok(t.value(out).item())
    };
    let mut numeric = Vec::with_capacity(point.len());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * h));
    }

    let (worst_index, max_rel_error) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
        tol,
        passed: max_rel_error < tol,
    })
}
