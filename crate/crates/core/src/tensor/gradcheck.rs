use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Largest relative disagreement between the tape gradient of `f` at `point`
/// and central differences with step `epsilon`:
/// `max_i |analytic_i - numeric_i| / (|analytic_i| + |numeric_i| + 1e-12)`.
pub fn gradient_check<F>(f: F, point: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let y = f(&mut tape, x)?;
    tape.backward(y)?;
    let analytic = match tape.grad(x) {
        Some(g) => g.to_vec(),
        None => alloc::vec![0.0; point.len()],
    };

    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(t, false);
        let y = f(&mut tape, x)?;
        tape.value(y)
            .item()
            .ok_or_else(|| Error::shape("gradient_check", "function must return a scalar"))
    };

    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = point.clone();
        plus.data_mut()[i] += epsilon;
        let mut minus = point.clone();
        minus.data_mut()[i] -= epsilon;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * epsilon);
        let err = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}
