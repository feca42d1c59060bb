//! Central finite-difference validation of analytic gradients.

use super::{Real, Tape, Tensor, Var};
use crate::error::Result;

/// Maximum over coordinates of
/// `|analytic − central| / (|analytic| + |central| + 1e-8)`.
///
/// `f` builds a scalar from the input node on the given tape.
pub fn gradient_check<T, F>(f: F, x: &Tensor<T>, step: f64) -> Result<f64>
where
    T: Real,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.leaf(x.clone(), true);
    let root = f(&mut tape, input)?;
    let grads = tape.backward(root)?;
    let analytic = grads.get(input).expect("input requires grad").clone();

    let eval = |probe: Tensor<T>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe, false);
        let out = f(&mut t, v)?;
        Ok(t.value(out).item().as_f64())
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        let xi = x.data()[i].as_f64();
        plus.data_mut()[i] = T::lit(xi + step);
        minus.data_mut()[i] = T::lit(xi - step);
        let central = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let a = analytic.data()[i].as_f64();
        let err = (a - central).abs() / (a.abs() + central.abs() + 1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
