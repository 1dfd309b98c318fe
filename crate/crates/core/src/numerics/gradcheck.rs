use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Relative error with the `max(|a|, |b|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of `f` at `x` against central differences
/// `(f(x + eps·e_i) − f(x − eps·e_i)) / 2eps` and returns the worst
/// coordinate's relative error.
///
/// `f` receives a fresh tape and the variable bound to `x` and must return a
/// scalar.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let analytic = tape.backward(out)?.wrt(xv);

    let eval = |probe: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::inference();
        let v = tape.constant(probe);
        let out = f(&mut tape, v)?;
        let value = tape.value(out).item()?;
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::NonFinite { op: "grad_check".into() })
        }
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
